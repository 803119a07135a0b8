//! Small fully-connected networks with hand-written reverse passes, the Adam
//! optimizer and a central-difference gradient checker.
//!
//! Every learned component in the crate (velocity decoder, template SDF,
//! dense denoiser fallback) is an [`Mlp`]. Parameters live in one flat
//! buffer so that optimizers and gradient checks can treat a network as a
//! plain vector:
//!
//! ```text
//! for each layer k:  W_k (out × in, row-major)  then  b_k (out)
//! ```

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Softplus,
    Sine,
    /// `x * sigmoid(x)`, a smooth relu.
    Silu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Tanh,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
            Activation::Sine => x.sin(),
            Activation::Silu => x * sigmoid(x),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => sigmoid(x),
            Activation::Sine => x.cos(),
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

impl OutputActivation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            OutputActivation::Identity => x,
            OutputActivation::Tanh => x.tanh(),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            OutputActivation::Identity => 1.0,
            OutputActivation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// A dense feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    params: Vec<f64>,
    hidden: Activation,
    output: OutputActivation,
}

/// Forward activations kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// `inputs[k]` is the input of layer `k`; the last entry is the network output.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of every layer.
    pre: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(
        layer_dims: &[usize],
        hidden: Activation,
        output: OutputActivation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(layer_dims, hidden, output)?;
        let mut offset = 0;
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut net.params[offset..offset + fan_in * fan_out] {
                *p = rng.random_range(-bound..bound);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn zeros(layer_dims: &[usize], hidden: Activation, output: OutputActivation) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::Config(format!(
                "layer dims must be at least two positive sizes, got {layer_dims:?}"
            )));
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            params: vec![0.0; param_count(layer_dims)],
            hidden,
            output,
        })
    }

    pub fn from_params(
        layer_dims: &[usize],
        hidden: Activation,
        output: OutputActivation,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut net = Self::zeros(layer_dims, hidden, output)?;
        if params.len() != net.params.len() {
            return Err(Error::Shape {
                context: "mlp parameters",
                expected: net.params.len(),
                actual: params.len(),
            });
        }
        check_finite("mlp parameters", &params)?;
        net.params = params;
        Ok(net)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn layer_offset(&self, layer: usize) -> usize {
        param_count(&self.layer_dims[..=layer])
    }

    /// Weight matrix of `layer`, row-major `(out × in)`.
    pub fn weights(&self, layer: usize) -> &[f64] {
        let (i, o) = (self.layer_dims[layer], self.layer_dims[layer + 1]);
        let off = self.layer_offset(layer);
        &self.params[off..off + i * o]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        let (i, o) = (self.layer_dims[layer], self.layer_dims[layer + 1]);
        let off = self.layer_offset(layer) + i * o;
        &self.params[off..off + o]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let (i, o) = (self.layer_dims[layer], self.layer_dims[layer + 1]);
        let off = self.layer_offset(layer);
        &mut self.params[off..off + i * o]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        let (i, o) = (self.layer_dims[layer], self.layer_dims[layer + 1]);
        let off = self.layer_offset(layer) + i * o;
        &mut self.params[off..off + o]
    }

    /// Zeroes the weights and bias of the output layer.
    pub fn zero_last_layer(&mut self) {
        let last = self.num_layers() - 1;
        self.weights_mut(last).fill(0.0);
        self.biases_mut(last).fill(0.0);
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape {
                context: "mlp input",
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn layer_forward(&self, layer: usize, offset: usize, x: &[f64], z: &mut [f64]) {
        let n_in = self.layer_dims[layer];
        let n_out = self.layer_dims[layer + 1];
        let w = &self.params[offset..offset + n_in * n_out];
        let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
        for (o, zo) in z.iter_mut().enumerate() {
            *zo = dot(&w[o * n_in..(o + 1) * n_in], x) + b[o];
        }
    }

    /// Evaluates the network.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut offset = 0;
        let last = self.num_layers() - 1;
        for layer in 0..self.num_layers() {
            let n_out = self.layer_dims[layer + 1];
            let mut z = vec![0.0; n_out];
            self.layer_forward(layer, offset, &cur, &mut z);
            if layer == last {
                z.iter_mut().for_each(|v| *v = self.output.apply(*v));
            } else {
                z.iter_mut().for_each(|v| *v = self.hidden.apply(*v));
            }
            offset += self.layer_dims[layer] * n_out + n_out;
            cur = z;
        }
        Ok(cur)
    }

    /// Evaluates the network and keeps what the reverse pass needs.
    pub fn forward_traced(&self, x: &[f64]) -> Result<MlpTrace> {
        self.check_input(x)?;
        let n = self.num_layers();
        let mut inputs = Vec::with_capacity(n + 1);
        let mut pre = Vec::with_capacity(n);
        inputs.push(x.to_vec());
        let mut offset = 0;
        for layer in 0..n {
            let n_out = self.layer_dims[layer + 1];
            let mut z = vec![0.0; n_out];
            self.layer_forward(layer, offset, &inputs[layer], &mut z);
            let act: Vec<f64> = if layer == n - 1 {
                z.iter().map(|&v| self.output.apply(v)).collect()
            } else {
                z.iter().map(|&v| self.hidden.apply(v)).collect()
            };
            offset += self.layer_dims[layer] * n_out + n_out;
            pre.push(z);
            inputs.push(act);
        }
        Ok(MlpTrace { inputs, pre })
    }

    /// Reverse pass for `upstreamᵀ · f(x)`.
    ///
    /// Parameter gradients are accumulated into `param_grad` when given (its
    /// layout matches [`Mlp::params`]); the gradient with respect to the input
    /// is returned.
    pub fn backward(
        &self,
        trace: &MlpTrace,
        upstream: &[f64],
        mut param_grad: Option<&mut [f64]>,
    ) -> Result<Vec<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape {
                context: "mlp upstream gradient",
                expected: self.output_dim(),
                actual: upstream.len(),
            });
        }
        if let Some(g) = param_grad.as_deref() {
            if g.len() != self.params.len() {
                return Err(Error::Shape {
                    context: "mlp parameter gradient",
                    expected: self.params.len(),
                    actual: g.len(),
                });
            }
        }
        let n = self.num_layers();
        let mut delta: Vec<f64> = upstream
            .iter()
            .zip(&trace.pre[n - 1])
            .map(|(u, z)| u * self.output.derivative(*z))
            .collect();
        for layer in (0..n).rev() {
            let n_in = self.layer_dims[layer];
            let n_out = self.layer_dims[layer + 1];
            let offset = self.layer_offset(layer);
            let x = &trace.inputs[layer];
            if let Some(g) = param_grad.as_deref_mut() {
                let (gw, gb) = g[offset..offset + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for o in 0..n_out {
                    if delta[o] != 0.0 {
                        axpy(delta[o], x, &mut gw[o * n_in..(o + 1) * n_in]);
                    }
                    gb[o] += delta[o];
                }
            }
            let w = &self.params[offset..offset + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                if delta[o] != 0.0 {
                    axpy(delta[o], &w[o * n_in..(o + 1) * n_in], &mut prev);
                }
            }
            if layer > 0 {
                for (p, z) in prev.iter_mut().zip(&trace.pre[layer - 1]) {
                    *p *= self.hidden.derivative(*z);
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// Gradients of `upstreamᵀ · f(x)` with respect to the parameters and to `x`.
    pub fn grad(&self, x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let trace = self.forward_traced(x)?;
        let mut pg = vec![0.0; self.params.len()];
        let ig = self.backward(&trace, upstream, Some(&mut pg))?;
        Ok((pg, ig))
    }

    /// FNV-1a over the raw parameter bits; used to verify freezing contracts.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for byte in p.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn to_checkpoint(&self) -> MlpCheckpoint {
        MlpCheckpoint {
            format: MlpCheckpoint::FORMAT.to_string(),
            version: MlpCheckpoint::VERSION,
            layer_dims: self.layer_dims.clone(),
            hidden_activation: self.hidden,
            output_activation: self.output,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: MlpCheckpoint) -> Result<Self> {
        if ckpt.format != MlpCheckpoint::FORMAT || ckpt.version != MlpCheckpoint::VERSION {
            return Err(Error::Format(format!(
                "expected {} v{}, found {} v{}",
                MlpCheckpoint::FORMAT,
                MlpCheckpoint::VERSION,
                ckpt.format,
                ckpt.version
            )));
        }
        Self::from_params(
            &ckpt.layer_dims,
            ckpt.hidden_activation,
            ckpt.output_activation,
            ckpt.params,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_checkpoint(serde_json::from_slice(&bytes)?)
    }
}

/// On-disk network layout (JSON). Floats are written in shortest round-trip
/// form, so a save/load cycle is bit exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpCheckpoint {
    pub format: String,
    pub version: u32,
    pub layer_dims: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: OutputActivation,
    pub params: Vec<f64>,
}

impl MlpCheckpoint {
    pub const FORMAT: &'static str = "diffeoshape.mlp";
    pub const VERSION: u32 = 1;
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        let n = self.first_moment.len();
        for (context, len) in [("adam parameters", params.len()), ("adam gradients", grads.len())] {
            if len != n {
                return Err(Error::Shape {
                    context,
                    expected: n,
                    actual: len,
                });
            }
        }
        check_finite("adam gradients", grads)?;
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..n {
            let g = grads[i];
            let m = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            params[i] -= self.lr * (m / c1) / ((v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Free function form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    state.step(params, grads)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter_index: usize,
    pub errors: Vec<f64>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Denominator floor of the relative error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Ulps of accumulated error assumed in one loss evaluation.
pub const NOISE_ULPS: f64 = 8.0;

/// Compares the analytic gradient of `loss` at `params` with the
/// fourth-order five-point central difference of step `h`.
///
/// `loss` returns the value and its analytic gradient. The part of each
/// discrepancy within the round-off bound of the stencil,
/// `NOISE_ULPS · ε · max|f| · (18/12) / h`, is not counted: below it the
/// numeric derivative carries no information.
pub fn grad_check<F>(mut loss: F, params: &[f64], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    grad_check_with_floor(&mut loss, params, h, GRAD_CHECK_FLOOR)
}

pub fn grad_check_with_floor<F>(
    mut loss: F,
    params: &[f64],
    h: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let (value, analytic) = loss(params)?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "grad_check loss",
            index: 0,
        });
    }
    if analytic.len() != params.len() {
        return Err(Error::Shape {
            context: "grad_check analytic gradient",
            expected: params.len(),
            actual: analytic.len(),
        });
    }
    let mut p = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut errors = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut f = [0.0; 4];
        for (slot, k) in f.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
            p[i] = params[i] + k * h;
            let (v, _) = loss(&p)?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "grad_check perturbed loss",
                    index: i,
                });
            }
            *slot = v;
        }
        p[i] = params[i];
        let n = (-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * h);
        let scale = f.iter().fold(value.abs(), |m, v| m.max(v.abs()));
        let noise = NOISE_ULPS * f64::EPSILON * scale * 1.5 / h;
        let a = analytic[i];
        let denom = a.abs().max(n.abs()).max(floor);
        numeric.push(n);
        errors.push(((a - n).abs() - noise).max(0.0) / denom);
    }
    let (worst, max) = errors
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    Ok(GradCheckReport {
        max_relative_error: max,
        worst_parameter_index: worst,
        errors,
        analytic,
        numeric,
    })
}
