//! Delay simulation, correlated-latent VAE and CVaR-driven task offloading
//! for multi-access edge computing networks.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod scenario;
pub mod seed;
pub mod nn;
pub mod optimizer;
pub mod risk;
pub mod sim;
pub mod vae;

pub use error::{Error, Result};
