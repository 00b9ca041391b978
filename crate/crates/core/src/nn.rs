//! A small reverse-mode differentiable network: dense, 1-D convolution and
//! rectifier layers, SGD with momentum and JSON checkpoints.
//!
//! Networks process one example at a time. `forward` is pure; `forward_recorded`
//! also stores the per-layer inputs on a [`Tape`] that `backward` consumes.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{n} values for shape {shape:?}"),
                found: values.len().to_string(),
            });
        }
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
            grad: None,
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
            grad: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn zero_grad(&mut self) {
        self.grad = Some(vec![0.0; self.values.len()]);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Layer {
    /// `y = W x + b`; the input is flattened, so any shape with `inputs`
    /// elements is accepted.
    Dense {
        inputs: usize,
        outputs: usize,
        /// Row-major `outputs × inputs`.
        weights: Vec<f64>,
        biases: Vec<f64>,
    },
    /// Valid (unpadded) cross-correlation over `[channels, length]` inputs.
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        /// `out_channels × in_channels × kernel`.
        weights: Vec<f64>,
        biases: Vec<f64>,
    },
    Relu,
}

fn xavier<R: Rng + ?Sized>(rng: &mut R, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-a..=a)).collect()
}

impl Layer {
    pub fn dense<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Layer::Dense {
            inputs,
            outputs,
            weights: xavier(rng, inputs * outputs, inputs, outputs),
            biases: vec![0.0; outputs],
        }
    }

    pub fn dense_identity(n: usize) -> Self {
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            weights[i * n + i] = 1.0;
        }
        Layer::Dense {
            inputs: n,
            outputs: n,
            weights,
            biases: vec![0.0; n],
        }
    }

    pub fn conv1d<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Layer::Conv1d {
            in_channels,
            out_channels,
            kernel,
            stride,
            weights: xavier(
                rng,
                out_channels * in_channels * kernel,
                in_channels * kernel,
                out_channels * kernel,
            ),
            biases: vec![0.0; out_channels],
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Layer::Dense { weights, biases, .. } | Layer::Conv1d { weights, biases, .. } => {
                weights.len() + biases.len()
            }
            Layer::Relu => 0,
        }
    }

    /// Weights followed by biases.
    pub fn params(&self) -> Vec<f64> {
        match self {
            Layer::Dense { weights, biases, .. } | Layer::Conv1d { weights, biases, .. } => {
                weights.iter().chain(biases).copied().collect()
            }
            Layer::Relu => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Option<(&mut Vec<f64>, &mut Vec<f64>)> {
        match self {
            Layer::Dense { weights, biases, .. } | Layer::Conv1d { weights, biases, .. } => {
                Some((weights, biases))
            }
            Layer::Relu => None,
        }
    }

    pub fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let numel: usize = input.iter().product();
        match self {
            Layer::Dense {
                inputs, outputs, ..
            } => {
                if numel != *inputs {
                    return Err(Error::LayerShape {
                        layer: index,
                        expected: vec![*inputs],
                        found: input.to_vec(),
                    });
                }
                Ok(vec![*outputs])
            }
            Layer::Conv1d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if input.len() != 2 || input[0] != *in_channels || input[1] < *kernel {
                    return Err(Error::LayerShape {
                        layer: index,
                        expected: vec![*in_channels, *kernel],
                        found: input.to_vec(),
                    });
                }
                Ok(vec![*out_channels, (input[1] - kernel) / stride + 1])
            }
            Layer::Relu => Ok(input.to_vec()),
        }
    }

    fn forward(&self, index: usize, x: &Tensor) -> Result<Tensor> {
        let shape = self.output_shape(index, &x.shape)?;
        let mut y = Tensor::zeros(shape);
        match self {
            Layer::Dense {
                inputs,
                outputs,
                weights,
                biases,
            } => {
                for o in 0..*outputs {
                    let row = &weights[o * inputs..(o + 1) * inputs];
                    y.values[o] = biases[o] + row.iter().zip(&x.values).map(|(w, v)| w * v).sum::<f64>();
                }
            }
            Layer::Conv1d {
                in_channels,
                out_channels,
                kernel,
                stride,
                weights,
                biases,
            } => {
                let len = x.shape[1];
                let out_len = y.shape[1];
                for o in 0..*out_channels {
                    for t in 0..out_len {
                        let mut acc = biases[o];
                        for c in 0..*in_channels {
                            let w = &weights[(o * in_channels + c) * kernel..][..*kernel];
                            let xs = &x.values[c * len + t * stride..][..*kernel];
                            acc += w.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                        }
                        y.values[o * out_len + t] = acc;
                    }
                }
            }
            Layer::Relu => {
                for (o, v) in y.values.iter_mut().zip(&x.values) {
                    *o = v.max(0.0);
                }
            }
        }
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("layer {index} forward")));
        }
        Ok(y)
    }

    /// Returns the input gradient and accumulates parameter gradients into
    /// `param_grad` (weights then biases).
    fn backward(&self, x: &Tensor, gy: &[f64], param_grad: &mut [f64]) -> Vec<f64> {
        let mut gx = vec![0.0; x.len()];
        match self {
            Layer::Dense {
                inputs,
                outputs,
                weights,
                ..
            } => {
                let (gw, gb) = param_grad.split_at_mut(inputs * outputs);
                for o in 0..*outputs {
                    let g = gy[o];
                    gb[o] += g;
                    if g == 0.0 {
                        continue;
                    }
                    let row = &weights[o * inputs..(o + 1) * inputs];
                    let grow = &mut gw[o * inputs..(o + 1) * inputs];
                    for i in 0..*inputs {
                        grow[i] += g * x.values[i];
                        gx[i] += g * row[i];
                    }
                }
            }
            Layer::Conv1d {
                in_channels,
                out_channels,
                kernel,
                stride,
                weights,
                ..
            } => {
                let len = x.shape[1];
                let out_len = (len - kernel) / stride + 1;
                let (gw, gb) = param_grad.split_at_mut(out_channels * in_channels * kernel);
                for o in 0..*out_channels {
                    for t in 0..out_len {
                        let g = gy[o * out_len + t];
                        gb[o] += g;
                        if g == 0.0 {
                            continue;
                        }
                        for c in 0..*in_channels {
                            let base = (o * in_channels + c) * kernel;
                            let xoff = c * len + t * stride;
                            for k in 0..*kernel {
                                gw[base + k] += g * x.values[xoff + k];
                                gx[xoff + k] += g * weights[base + k];
                            }
                        }
                    }
                }
            }
            Layer::Relu => {
                for i in 0..gx.len() {
                    if x.values[i] > 0.0 {
                        gx[i] = gy[i];
                    }
                }
            }
        }
        gx
    }
}

/// Inputs seen by each layer during one recorded forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    inputs: Vec<Tensor>,
    output_len: usize,
}

impl Tape {
    pub fn is_recorded(&self) -> bool {
        !self.inputs.is_empty()
    }

    /// Input to layer `i`; the output of layer `i - 1`.
    pub fn layer_input(&self, i: usize) -> Option<&Tensor> {
        self.inputs.get(i)
    }
}

/// Gradients of a scalar loss, laid out like [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Vec<f64>>,
    pub input: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net.layers.iter().map(|l| vec![0.0; l.n_params()]).collect(),
            input: Vec::new(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.layers.iter_mut().flatten().for_each(|g| *g *= c);
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flatten().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().all(|g| g.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let net = Self {
            input_shape,
            layers,
        };
        net.output_shape()?;
        Ok(net)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for (i, l) in self.layers.iter().enumerate() {
            shape = l.output_shape(i, &shape)?;
        }
        Ok(shape)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Layer::n_params).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} parameters", self.n_params()),
                found: flat.len().to_string(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            if let Some((w, b)) = l.params_mut() {
                for v in w.iter_mut().chain(b.iter_mut()) {
                    *v = flat[off];
                    off += 1;
                }
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            cur = l.forward(i, &cur)?;
        }
        Ok(cur)
    }

    pub fn forward_recorded(&self, x: &Tensor, tape: &mut Tape) -> Result<Tensor> {
        tape.inputs.clear();
        let mut cur = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let next = l.forward(i, &cur)?;
            tape.inputs.push(std::mem::replace(&mut cur, next));
        }
        tape.output_len = cur.len();
        Ok(cur)
    }

    /// Back-propagates `grad_output = dL/dy` through the recorded pass.
    pub fn backward(&self, tape: &Tape, grad_output: &[f64]) -> Result<Gradients> {
        if !tape.is_recorded() || tape.inputs.len() != self.layers.len() {
            return Err(Error::NoForwardRecord);
        }
        if grad_output.len() != tape.output_len {
            return Err(Error::DimensionMismatch {
                expected: format!("output gradient of length {}", tape.output_len),
                found: grad_output.len().to_string(),
            });
        }
        let mut grads = Gradients::zeros_like(self);
        let mut g = grad_output.to_vec();
        for (i, l) in self.layers.iter().enumerate().rev() {
            g = l.backward(&tape.inputs[i], &g, &mut grads.layers[i]);
        }
        if !g.iter().all(|v| v.is_finite()) || !grads.is_finite() {
            return Err(Error::NonFinite("backward pass".into()));
        }
        grads.input = g;
        Ok(grads)
    }

    /// Convenience for scalar `loss = Σ y`.
    pub fn backward_sum(&self, tape: &Tape) -> Result<Gradients> {
        self.backward(tape, &vec![1.0; tape.output_len])
    }
}

/// `p ← p − lr·g`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}

/// SGD with classical momentum: `v ← μ v + g`, `p ← p − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) {
        if self.velocity.len() != net.layers.len() {
            self.velocity = net.layers.iter().map(|l| vec![0.0; l.n_params()]).collect();
        }
        for ((layer, g), v) in net.layers.iter_mut().zip(&grads.layers).zip(&mut self.velocity) {
            let Some((w, b)) = layer.params_mut() else {
                continue;
            };
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = self.momentum * *vi + gi;
            }
            let (vw, vb) = v.split_at(w.len());
            sgd_step(w, vw, self.lr);
            sgd_step(b, vb, self.lr);
        }
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub version: u32,
    pub model: T,
}

pub fn save_checkpoint<T: Serialize>(model: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&Checkpoint {
        version: CHECKPOINT_VERSION,
        model,
    })?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint<T> = serde_json::from_str(&text)?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "{}: checkpoint version {} (expected {CHECKPOINT_VERSION})",
            path.display(),
            ck.version
        )));
    }
    Ok(ck.model)
}
