//! Structured-text experiment configuration.
//!
//! The file is TOML with the sections `[network]`, `[radio]`, `[compute]`,
//! `[risk]`, `[training]` and `[experiment]`. Unknown keys are rejected.
//! Any key can be overridden from the environment as
//! `MECRISK_<SECTION>_<KEY>=<toml value>`, e.g. `MECRISK_RADIO_TTI_MS=0.5`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{GridLayout, NetworkScenario, Point, RiskSpec, TaskModel};

pub const ENV_PREFIX: &str = "MECRISK_";
const SECTIONS: [&str; 6] = ["network", "radio", "compute", "risk", "training", "experiment"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

impl std::str::FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(Error::Config(format!("unknown scale {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub network: NetworkSection,
    pub radio: RadioSection,
    pub compute: ComputeSection,
    pub risk: RiskSpec,
    pub training: TrainingConfig,
    pub experiment: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub n_bs: usize,
    pub n_ue: usize,
    pub cell_side_m: f64,
    pub layout_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_bs_capacity: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bs_positions: Option<Vec<Point>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ue_positions: Option<Vec<Point>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadioSection {
    pub tti_ms: f64,
    pub bandwidth_hz: f64,
    pub p_bs_mw: f64,
    pub p_ue_mw: f64,
    pub gain_bs: f64,
    pub gain_ue: f64,
    pub noise_psd_dbm_hz: f64,
    pub pathloss_exponent: f64,
    pub pathloss_ref_db: f64,
    pub max_retx: u32,
    pub sinr_decode_threshold: f64,
    pub max_attempt_ttis: u32,
    pub activity_factor: f64,
    pub share_bandwidth: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeSection {
    pub f_max_hz: f64,
    pub cycles_median: f64,
    pub cycles_sigma: f64,
    pub heavy_share: f64,
    pub heavy_sigma: f64,
    pub uplink_bits_min: f64,
    pub uplink_bits_max: f64,
    pub downlink_bits_min: f64,
    pub downlink_bits_max: f64,
    /// Compute-trace CSV replacing the lognormal demand model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    /// Frequency at which `latency_ms` traces were measured; defaults to `f_max_hz`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_reference_hz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub window: usize,
    pub stride: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global L2 norm cap on each minibatch gradient; 0 disables clipping.
    pub grad_clip: f64,
    pub latent_samples: usize,
    pub eval_latent_samples: usize,
    pub prior_mu: Vec<f64>,
    pub prior_sigma: f64,
    pub conv_channels: usize,
    pub hidden: usize,
    pub pooled: bool,
    pub val_fraction: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            window: 16,
            stride: 8,
            epochs: 50,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            grad_clip: 5.0,
            latent_samples: 1,
            eval_latent_samples: 64,
            prior_mu: vec![0.0, 0.0],
            prior_sigma: 1.0,
            conv_channels: 8,
            hidden: 16,
            pooled: false,
            val_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostSource {
    Empirical,
    Vae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_drops: usize,
    pub bank_samples: usize,
    pub eval_drops: usize,
    pub max_iters: usize,
    /// Refine planner output with single moves and swaps.
    pub local_search: bool,
    pub seeds: usize,
    pub cost_source: CostSource,
    pub f_max_sweep_hz: Vec<f64>,
    pub ue_sweep: Vec<usize>,
    pub tau_grid_ms: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_drops: 10_000,
            bank_samples: 2_000,
            eval_drops: 5_000,
            max_iters: 10,
            local_search: true,
            seeds: 5,
            cost_source: CostSource::Empirical,
            f_max_sweep_hz: [5.0, 10.0, 20.0, 40.0, 80.0, 160.0, 320.0, 640.0, 1280.0, 2560.0]
                .iter()
                .map(|g| g * 1e9)
                .collect(),
            ue_sweep: vec![4, 8, 12, 16, 24, 32],
            tau_grid_ms: (1..=100).map(f64::from).collect(),
        }
    }
}

impl Config {
    pub fn preset(scale: Scale) -> Self {
        let desk = Self {
            network: NetworkSection {
                n_bs: 4,
                n_ue: 16,
                cell_side_m: 100.0,
                layout_seed: 1,
                per_bs_capacity: None,
                bs_positions: None,
                ue_positions: None,
            },
            radio: RadioSection {
                tti_ms: 1.0,
                bandwidth_hz: 10e6,
                p_bs_mw: 100.0,
                p_ue_mw: 10.0,
                gain_bs: 1.0,
                gain_ue: 1.0,
                noise_psd_dbm_hz: -170.0,
                pathloss_exponent: 3.5,
                pathloss_ref_db: 38.0,
                max_retx: 8,
                sinr_decode_threshold: 0.0,
                max_attempt_ttis: 8,
                activity_factor: 1.0,
                share_bandwidth: true,
            },
            compute: ComputeSection {
                f_max_hz: 20e9,
                cycles_median: TaskModel::default().cycles_median,
                cycles_sigma: TaskModel::default().cycles_sigma,
                heavy_share: TaskModel::default().heavy_share,
                heavy_sigma: TaskModel::default().heavy_sigma,
                uplink_bits_min: 1_000.0,
                uplink_bits_max: 10_000.0,
                downlink_bits_min: 1_000.0,
                downlink_bits_max: 10_000.0,
                trace: None,
                trace_reference_hz: None,
            },
            risk: RiskSpec::default(),
            training: TrainingConfig::default(),
            experiment: ExperimentConfig::default(),
        };
        match scale {
            Scale::Desk => desk,
            Scale::Paper => {
                let mut c = desk;
                c.network.n_bs = 10;
                c.network.n_ue = 40;
                c.radio.bandwidth_hz = 100e6;
                c.experiment.n_drops = 1_000;
                c.experiment.ue_sweep = vec![10, 20, 30, 40, 50];
                c
            }
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_str_with_env(text, std::env::vars())
    }

    /// Parses `text` after applying `MECRISK_*` overrides from `env`.
    pub fn from_toml_str_with_env(
        text: &str,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        apply_env_overrides(&mut table, env)?;
        let cfg: Config = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn layout(&self) -> GridLayout {
        GridLayout {
            n_bs: self.network.n_bs,
            n_ue: self.network.n_ue,
            cell_side_m: self.network.cell_side_m,
        }
    }

    /// Builds the scenario and validates it.
    pub fn scenario(&self) -> Result<NetworkScenario> {
        let n = &self.network;
        let r = &self.radio;
        let c = &self.compute;
        let layout = self.layout();
        let s = NetworkScenario {
            n_bs: n.n_bs,
            n_ue: n.n_ue,
            bs_positions: n.bs_positions.clone().unwrap_or_else(|| layout.bs_positions()),
            ue_positions: n
                .ue_positions
                .clone()
                .unwrap_or_else(|| layout.ue_positions(n.layout_seed)),
            tti_ms: r.tti_ms,
            bandwidth_hz: r.bandwidth_hz,
            p_bs_mw: r.p_bs_mw,
            p_ue_mw: r.p_ue_mw,
            gain_bs: r.gain_bs,
            gain_ue: r.gain_ue,
            noise_psd_dbm_hz: r.noise_psd_dbm_hz,
            f_max_hz: c.f_max_hz,
            pathloss_exponent: r.pathloss_exponent,
            pathloss_ref_db: r.pathloss_ref_db,
            max_retx: r.max_retx,
            sinr_decode_threshold: r.sinr_decode_threshold,
            max_attempt_ttis: r.max_attempt_ttis,
            activity_factor: r.activity_factor,
            share_bandwidth: r.share_bandwidth,
            per_bs_capacity: n.per_bs_capacity.unwrap_or(n.n_ue),
            tasks: TaskModel {
                uplink_bits_min: c.uplink_bits_min,
                uplink_bits_max: c.uplink_bits_max,
                downlink_bits_min: c.downlink_bits_min,
                downlink_bits_max: c.downlink_bits_max,
                cycles_median: c.cycles_median,
                cycles_sigma: c.cycles_sigma,
                heavy_share: c.heavy_share,
                heavy_sigma: c.heavy_sigma,
            },
        };
        s.validate()?;
        Ok(s)
    }

    /// A config whose `scenario()` reproduces `s` exactly.
    pub fn from_scenario(s: &NetworkScenario, base: &Config) -> Self {
        let mut c = base.clone();
        c.network.n_bs = s.n_bs;
        c.network.n_ue = s.n_ue;
        c.network.per_bs_capacity = Some(s.per_bs_capacity);
        c.network.bs_positions = Some(s.bs_positions.clone());
        c.network.ue_positions = Some(s.ue_positions.clone());
        c.radio = RadioSection {
            tti_ms: s.tti_ms,
            bandwidth_hz: s.bandwidth_hz,
            p_bs_mw: s.p_bs_mw,
            p_ue_mw: s.p_ue_mw,
            gain_bs: s.gain_bs,
            gain_ue: s.gain_ue,
            noise_psd_dbm_hz: s.noise_psd_dbm_hz,
            pathloss_exponent: s.pathloss_exponent,
            pathloss_ref_db: s.pathloss_ref_db,
            max_retx: s.max_retx,
            sinr_decode_threshold: s.sinr_decode_threshold,
            max_attempt_ttis: s.max_attempt_ttis,
            activity_factor: s.activity_factor,
            share_bandwidth: s.share_bandwidth,
        };
        c.compute.f_max_hz = s.f_max_hz;
        c.compute.cycles_median = s.tasks.cycles_median;
        c.compute.cycles_sigma = s.tasks.cycles_sigma;
        c.compute.heavy_share = s.tasks.heavy_share;
        c.compute.heavy_sigma = s.tasks.heavy_sigma;
        c.compute.uplink_bits_min = s.tasks.uplink_bits_min;
        c.compute.uplink_bits_max = s.tasks.uplink_bits_max;
        c.compute.downlink_bits_min = s.tasks.downlink_bits_min;
        c.compute.downlink_bits_max = s.tasks.downlink_bits_max;
        c
    }
}

fn apply_env_overrides(
    table: &mut toml::Table,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<()> {
    for (name, raw) in env {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let rest = rest.to_ascii_lowercase();
        let Some(section) = SECTIONS
            .iter()
            .find(|s| rest.starts_with(&format!("{s}_")))
        else {
            return Err(Error::Config(format!("{name}: unknown section")));
        };
        let key = &rest[section.len() + 1..];
        let value = parse_env_value(&raw);
        let entry = table
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        match entry {
            toml::Value::Table(t) => {
                t.insert(key.to_string(), value);
            }
            _ => return Err(Error::Config(format!("[{section}] is not a table"))),
        }
    }
    Ok(())
}

fn parse_env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn no_env() -> Vec<(String, String)> {
        Vec::new()
    }

    #[test]
    fn presets_are_valid() {
        for scale in [Scale::Desk, Scale::Paper] {
            let c = Config::preset(scale);
            c.scenario().unwrap();
            let back = Config::from_toml_str_with_env(&c.to_toml_string(), no_env()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = Config::preset(Scale::Desk).to_toml_string();
        text = text.replace("tti_ms =", "tti_msec =");
        let err = Config::from_toml_str_with_env(&text, no_env()).unwrap_err();
        assert!(err.to_string().contains("tti_msec"), "{err}");

        let text = Config::preset(Scale::Desk).to_toml_string() + "\n[extra]\nfoo = 1\n";
        assert!(Config::from_toml_str_with_env(&text, no_env()).is_err());
    }

    #[test]
    fn env_overrides_apply() {
        let text = Config::preset(Scale::Desk).to_toml_string();
        let env = vec![
            ("MECRISK_RADIO_TTI_MS".to_string(), "0.5".to_string()),
            ("MECRISK_NETWORK_N_UE".to_string(), "7".to_string()),
            ("MECRISK_EXPERIMENT_COST_SOURCE".to_string(), "vae".to_string()),
            ("UNRELATED".to_string(), "x".to_string()),
        ];
        let c = Config::from_toml_str_with_env(&text, env).unwrap();
        assert_eq!(c.radio.tti_ms, 0.5);
        assert_eq!(c.network.n_ue, 7);
        assert_eq!(c.experiment.cost_source, CostSource::Vae);

        let bad = vec![("MECRISK_RADIO_TTIMS".to_string(), "1".to_string())];
        assert!(Config::from_toml_str_with_env(&text, bad).is_err());
    }

    #[test]
    fn invalid_scenario_surfaces_violations() {
        let mut c = Config::preset(Scale::Desk);
        c.compute.f_max_hz = -1.0;
        let err = c.scenario().unwrap_err();
        assert!(err.to_string().contains("f_max_hz > 0"), "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn scenario_config_roundtrip(
            n_bs in 1usize..6,
            n_ue in 1usize..12,
            seed in 0..=i64::MAX as u64,
            side in 10.0f64..500.0,
            tti in 0.01f64..2.0,
            noise in -180.0f64..-60.0,
            thr in -10.0f64..10.0,
        ) {
            let mut c = Config::preset(Scale::Desk);
            c.network.n_bs = n_bs;
            c.network.n_ue = n_ue;
            c.network.cell_side_m = side;
            c.network.layout_seed = seed;
            c.radio.tti_ms = tti;
            c.radio.noise_psd_dbm_hz = noise;
            c.radio.sinr_decode_threshold = thr;
            let s = c.scenario().unwrap();
            let text = Config::from_scenario(&s, &c).to_toml_string();
            let back = Config::from_toml_str_with_env(&text, no_env()).unwrap().scenario().unwrap();
            prop_assert_eq!(back, s);
        }
    }

    #[test]
    fn infinite_threshold_roundtrips() {
        let mut c = Config::preset(Scale::Desk);
        c.radio.sinr_decode_threshold = f64::NEG_INFINITY;
        let back = Config::from_toml_str_with_env(&c.to_toml_string(), no_env()).unwrap();
        assert_eq!(back.radio.sinr_decode_threshold, f64::NEG_INFINITY);
    }
}
