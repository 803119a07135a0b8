//! Denoising diffusion over triplanes viewed as `3C`-channel `L×L` images.
//!
//! Steps are 1-based: `t ∈ 1..=T`. The forward process is
//! `X_t = √ᾱ_t X_0 + √(1-ᾱ_t) ε`, the denoiser predicts `ε`, and one
//! ancestral step is
//!
//! ```text
//! X_{t-1} = (X_t - (1-α_t)/√(1-ᾱ_t) · ε_θ(X_t, t)) / √α_t + σ_t z,   z = 0 at t = 1
//! ```
//!
//! with `σ_t = √β_t`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};
use crate::field::Triplane;
use crate::nets::{Activation, AdamState, Mlp, MlpTrace, OutputActivation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

/// Per-step coefficients; index `t - 1` holds step `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("noise schedule needs at least one step".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    let sigma = beta.iter().map(|b| b.sqrt()).collect();
    Ok(NoiseSchedule { beta, alpha, alpha_bar, sigma })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_step(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index { index: t, max: self.steps() });
        }
        Ok(t - 1)
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.check_step(t)?])
    }
}

/// `√ᾱ_t x0 + √(1-ᾱ_t) ε`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    let ab = sched.alpha_bar_at(t)?;
    if eps.len() != x0.len() {
        return Err(Error::Shape { context: "q_sample noise", expected: x0.len(), actual: eps.len() });
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Anything that predicts the noise in `x_t`.
pub trait NoisePredictor {
    fn predict_noise(&self, x: &[f64], t: usize) -> Result<Vec<f64>>;
}

/// One ancestral step from `x_t` to `x_{t-1}`; `eps_draw` is ignored at `t = 1`.
pub fn p_sample_step<P: NoisePredictor + ?Sized>(
    model: &P,
    xt: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    eps_draw: &[f64],
) -> Result<Vec<f64>> {
    let i = sched.check_step(t)?;
    if eps_draw.len() != xt.len() {
        return Err(Error::Shape { context: "p_sample_step noise", expected: xt.len(), actual: eps_draw.len() });
    }
    let eps_hat = model.predict_noise(xt, t)?;
    if eps_hat.len() != xt.len() {
        return Err(Error::Shape { context: "predicted noise", expected: xt.len(), actual: eps_hat.len() });
    }
    let (alpha, ab) = (sched.alpha[i], sched.alpha_bar[i]);
    let coef = (1.0 - alpha) / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let sigma = if t > 1 { sched.sigma[i] } else { 0.0 };
    Ok(xt
        .iter()
        .zip(&eps_hat)
        .zip(eps_draw)
        .map(|((x, e), z)| inv * (x - coef * e) + sigma * z)
        .collect())
}

/// Per-image-channel standardization of triplanes, clipped to `±clip`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriplaneStats {
    pub resolution: usize,
    pub channels: usize,
    /// One entry per image channel (`3C`).
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub clip: f64,
}

impl TriplaneStats {
    /// Channels with zero spread get `std = 1`.
    pub fn fit(triplanes: &[Triplane], clip: f64) -> Result<Self> {
        let first = triplanes.first().ok_or_else(|| Error::Stats("triplane statistics need data".into()))?;
        if !(clip > 0.0) {
            return Err(Error::Config(format!("clip must be positive, got {clip}")));
        }
        let (l, c) = (first.resolution(), first.channels());
        let (nch, px) = (3 * c, l * l);
        let mut mean = vec![0.0; nch];
        let mut sq = vec![0.0; nch];
        for tp in triplanes {
            if (tp.resolution(), tp.channels()) != (l, c) {
                return Err(Error::Shape { context: "triplane set", expected: first.data().len(), actual: tp.data().len() });
            }
            let img = tp.to_channels();
            for ch in 0..nch {
                for v in &img[ch * px..(ch + 1) * px] {
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let n = (triplanes.len() * px) as f64;
        let mut std = vec![0.0; nch];
        for ch in 0..nch {
            mean[ch] /= n;
            let var = (sq[ch] / n - mean[ch] * mean[ch]).max(0.0);
            std[ch] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(Self { resolution: l, channels: c, mean, std, clip })
    }

    pub fn image_len(&self) -> usize {
        3 * self.channels * self.resolution * self.resolution
    }

    pub fn normalize(&self, tp: &Triplane) -> Result<Vec<f64>> {
        if (tp.resolution(), tp.channels()) != (self.resolution, self.channels) {
            return Err(Error::Shape { context: "normalized triplane", expected: self.image_len(), actual: tp.data().len() });
        }
        let px = self.resolution * self.resolution;
        let mut img = tp.to_channels();
        for (i, v) in img.iter_mut().enumerate() {
            let ch = i / px;
            *v = ((*v - self.mean[ch]) / self.std[ch]).clamp(-self.clip, self.clip);
        }
        Ok(img)
    }

    /// Clips to `±clip`, undoes the standardization and splits into planes.
    pub fn denormalize(&self, image: &[f64]) -> Result<Triplane> {
        if image.len() != self.image_len() {
            return Err(Error::Shape { context: "generated image", expected: self.image_len(), actual: image.len() });
        }
        let px = self.resolution * self.resolution;
        let raw: Vec<f64> = image
            .iter()
            .enumerate()
            .map(|(i, v)| v.clamp(-self.clip, self.clip) * self.std[i / px] + self.mean[i / px])
            .collect();
        Triplane::from_channels(self.resolution, self.channels, &raw)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Denoiser backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserArch {
    /// Conv U-Net: `base` channels at full resolution, `mid` at half and
    /// quarter resolution. The quarter-resolution bottleneck is upsampled and
    /// added back at half resolution; one skip connection at full resolution.
    Conv { base: usize, mid: usize },
    /// Dense network over the flattened image.
    Dense { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub arch: DenoiserArch,
    /// Length of the sinusoidal time embedding (even).
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { arch: DenoiserArch::Conv { base: 32, mid: 64 }, time_dim: 32 }
    }
}

/// `[sin(t ω_k), cos(t ω_k)]` with `ω_k = 10000^(-k / (dim/2))`.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let w = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (t as f64 * w).sin();
        out[half + k] = (t as f64 * w).cos();
    }
    out
}

/// 3×3 convolution with zero padding 1; weights `[cout][cin][3][3]`, then biases.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Conv {
    cin: usize,
    cout: usize,
    stride: usize,
    offset: usize,
}

impl Conv {
    fn len(&self) -> usize {
        self.cout * self.cin * 9 + self.cout
    }

    fn out_size(&self, n: usize) -> usize {
        (n - 1) / self.stride + 1
    }

    /// Calls `f(out_index, in_index)` for every valid tap of kernel offset
    /// `(ky, kx)`, per output row segment.
    #[inline]
    fn taps(&self, h: usize, w: usize, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        for oy in 0..ho {
            let iy = (oy * self.stride + ky) as isize - 1;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let iy = iy as usize;
            if self.stride == 1 {
                let lo = usize::from(kx == 0);
                let hi = wo.min(w + 1 - kx);
                // Contiguous run: out (oy, lo..hi) reads in (iy, lo+kx-1..).
                f(oy * wo + lo, iy * w + lo + kx - 1, hi.saturating_sub(lo));
            } else {
                for ox in 0..wo {
                    let ix = (ox * self.stride + kx) as isize - 1;
                    if ix >= 0 && (ix as usize) < w {
                        f(oy * wo + ox, iy * w + ix as usize, 1);
                    }
                }
            }
        }
    }

    fn forward(&self, p: &[f64], x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let np = ho * wo;
        let wts = &p[self.offset..self.offset + self.cout * self.cin * 9];
        let bias = &p[self.offset + self.cout * self.cin * 9..self.offset + self.len()];
        let mut y = vec![0.0; self.cout * np];
        for co in 0..self.cout {
            let yc = &mut y[co * np..(co + 1) * np];
            yc.fill(bias[co]);
            for ci in 0..self.cin {
                let xc = &x[ci * h * w..(ci + 1) * h * w];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = wts[((co * self.cin + ci) * 3 + ky) * 3 + kx];
                        self.taps(h, w, ky, kx, |o, i, n| {
                            for (yo, xi) in yc[o..o + n].iter_mut().zip(&xc[i..i + n]) {
                                *yo += wv * xi;
                            }
                        });
                    }
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, p: &[f64], x: &[f64], h: usize, w: usize, dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let np = self.out_size(h) * self.out_size(w);
        let nw = self.cout * self.cin * 9;
        let wts = &p[self.offset..self.offset + nw];
        let (gw, gb) = grad[self.offset..self.offset + self.len()].split_at_mut(nw);
        let mut dx = vec![0.0; self.cin * h * w];
        for co in 0..self.cout {
            let dyc = &dy[co * np..(co + 1) * np];
            gb[co] += dyc.iter().sum::<f64>();
            for ci in 0..self.cin {
                let xc = &x[ci * h * w..(ci + 1) * h * w];
                let dxc = &mut dx[ci * h * w..(ci + 1) * h * w];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let k = ((co * self.cin + ci) * 3 + ky) * 3 + kx;
                        let wv = wts[k];
                        let mut acc = 0.0;
                        self.taps(h, w, ky, kx, |o, i, n| {
                            for ((d, xi), dxi) in dyc[o..o + n].iter().zip(&xc[i..i + n]).zip(&mut dxc[i..i + n]) {
                                acc += d * xi;
                                *dxi += wv * d;
                            }
                        });
                        gw[k] += acc;
                    }
                }
            }
        }
        dx
    }
}

/// Dense map from the time embedding to one bias per channel.
#[derive(Debug, Clone, Copy, PartialEq)]
struct TimeProj {
    dim: usize,
    out: usize,
    offset: usize,
}

impl TimeProj {
    fn len(&self) -> usize {
        self.out * self.dim + self.out
    }

    fn forward(&self, p: &[f64], emb: &[f64]) -> Vec<f64> {
        let w = &p[self.offset..self.offset + self.out * self.dim];
        let b = &p[self.offset + self.out * self.dim..self.offset + self.len()];
        (0..self.out).map(|o| b[o] + w[o * self.dim..(o + 1) * self.dim].iter().zip(emb).map(|(a, e)| a * e).sum::<f64>()).collect()
    }

    /// `da` is the gradient of the pre-activation map with `px` pixels per channel.
    fn backward(&self, emb: &[f64], da: &[f64], px: usize, grad: &mut [f64]) {
        let (gw, gb) = grad[self.offset..self.offset + self.len()].split_at_mut(self.out * self.dim);
        for o in 0..self.out {
            let s: f64 = da[o * px..(o + 1) * px].iter().sum();
            gb[o] += s;
            for (g, e) in gw[o * self.dim..(o + 1) * self.dim].iter_mut().zip(emb) {
                *g += s * e;
            }
        }
    }
}

/// Nearest-neighbour upsampling of `c` channels from `lo × lo` to `hi × hi`
/// (`lo = ceil(hi / 2)`).
fn upsample(x: &[f64], c: usize, lo: usize, hi: usize) -> Vec<f64> {
    let mut u = vec![0.0; c * hi * hi];
    for ch in 0..c {
        for i in 0..hi {
            for j in 0..hi {
                u[(ch * hi + i) * hi + j] = x[(ch * lo + i / 2) * lo + j / 2];
            }
        }
    }
    u
}

/// Adjoint of [`upsample`]: sums each 2×2 block.
fn upsample_back(du: &[f64], c: usize, lo: usize, hi: usize) -> Vec<f64> {
    let mut d = vec![0.0; c * lo * lo];
    for ch in 0..c {
        for i in 0..hi {
            for j in 0..hi {
                d[(ch * lo + i / 2) * lo + j / 2] += du[(ch * hi + i) * hi + j];
            }
        }
    }
    d
}

fn add_channel_bias(a: &mut [f64], bias: &[f64], px: usize) {
    for (c, b) in bias.iter().enumerate() {
        a[c * px..(c + 1) * px].iter_mut().for_each(|v| *v += b);
    }
}

fn silu(a: &[f64]) -> Vec<f64> {
    a.iter().map(|&z| Activation::Silu.apply(z)).collect()
}

fn silu_back(a: &[f64], d: &[f64]) -> Vec<f64> {
    a.iter().zip(d).map(|(&z, g)| g * Activation::Silu.derivative(z)).collect()
}

#[derive(Debug, Clone, PartialEq)]
struct ConvNet {
    conv_in: Conv,
    conv_down: Conv,
    conv_low: Conv,
    conv_deep: Conv,
    conv_mid: Conv,
    conv_up: Conv,
    conv_out: Conv,
    t_in: TimeProj,
    t_down: TimeProj,
    t_low: TimeProj,
    t_deep: TimeProj,
    t_mid: TimeProj,
    t_up: TimeProj,
}

impl ConvNet {
    fn new(image_channels: usize, base: usize, mid: usize, time_dim: usize) -> (Self, usize) {
        let mut off = 0;
        let mut conv = |cin, cout, stride| {
            let c = Conv { cin, cout, stride, offset: off };
            off += c.len();
            c
        };
        let conv_in = conv(image_channels, base, 1);
        let conv_down = conv(base, mid, 2);
        let conv_low = conv(mid, mid, 2);
        let conv_deep = conv(mid, mid, 1);
        let conv_mid = conv(mid, mid, 1);
        let conv_up = conv(mid, base, 1);
        let conv_out = conv(2 * base, image_channels, 1);
        let mut proj = |out| {
            let t = TimeProj { dim: time_dim, out, offset: off };
            off += t.len();
            t
        };
        let t_in = proj(base);
        let t_down = proj(mid);
        let t_low = proj(mid);
        let t_deep = proj(mid);
        let t_mid = proj(mid);
        let t_up = proj(base);
        (Self { conv_in, conv_down, conv_low, conv_deep, conv_mid, conv_up, conv_out, t_in, t_down, t_low, t_deep, t_mid, t_up }, off)
    }

    fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        for c in [&self.conv_in, &self.conv_down, &self.conv_low, &self.conv_deep, &self.conv_mid, &self.conv_up] {
            let bound = (3.0 / (9 * c.cin) as f64).sqrt();
            for p in &mut params[c.offset..c.offset + c.cout * c.cin * 9] {
                *p = rng.random_range(-bound..bound);
            }
        }
        for t in [&self.t_in, &self.t_down, &self.t_low, &self.t_deep, &self.t_mid, &self.t_up] {
            let bound = (3.0 / t.dim as f64).sqrt();
            for p in &mut params[t.offset..t.offset + t.out * t.dim] {
                *p = rng.random_range(-bound..bound);
            }
        }
    }
}

/// Activations kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct DenoiserTrace {
    emb: Vec<f64>,
    input: Vec<f64>,
    inner: TraceInner,
}

#[derive(Debug, Clone)]
enum TraceInner {
    Conv {
        a1: Vec<f64>,
        h1: Vec<f64>,
        a2: Vec<f64>,
        h2: Vec<f64>,
        a5: Vec<f64>,
        h5: Vec<f64>,
        a6: Vec<f64>,
        m: Vec<f64>,
        a3: Vec<f64>,
        u: Vec<f64>,
        a4: Vec<f64>,
        cat: Vec<f64>,
    },
    Dense(MlpTrace),
}

#[derive(Debug, Clone, PartialEq)]
enum Body {
    Conv(ConvNet),
    Dense(Mlp),
}

/// Noise predictor over `image_channels × res × res` arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    res: usize,
    image_channels: usize,
    config: DenoiserConfig,
    body: Body,
    /// Conv parameters; empty for the dense body, which owns its own.
    params: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DenoiserCheckpoint {
    format: String,
    version: u32,
    res: usize,
    image_channels: usize,
    config: DenoiserConfig,
    params: Vec<f64>,
}

const DENOISER_FORMAT: &str = "diffeoshape.denoiser";

impl Denoiser {
    /// The last layer starts at zero, so an untrained model predicts no noise.
    pub fn new<R: Rng + ?Sized>(res: usize, image_channels: usize, config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        let mut d = Self::zeros(res, image_channels, config)?;
        match &mut d.body {
            Body::Conv(net) => net.init(&mut d.params, rng),
            Body::Dense(mlp) => {
                *mlp = Mlp::new(mlp.layer_dims(), Activation::Silu, OutputActivation::Identity, rng)?;
                mlp.zero_last_layer();
            }
        }
        Ok(d)
    }

    fn zeros(res: usize, image_channels: usize, config: DenoiserConfig) -> Result<Self> {
        if res == 0 || image_channels == 0 {
            return Err(Error::Config("denoiser needs positive resolution and channels".into()));
        }
        if config.time_dim == 0 || config.time_dim % 2 != 0 {
            return Err(Error::Config(format!("time_dim must be positive and even, got {}", config.time_dim)));
        }
        let (body, params) = match config.arch {
            DenoiserArch::Conv { base, mid } => {
                if base == 0 || mid == 0 {
                    return Err(Error::Config("conv widths must be positive".into()));
                }
                let (net, n) = ConvNet::new(image_channels, base, mid, config.time_dim);
                (Body::Conv(net), vec![0.0; n])
            }
            DenoiserArch::Dense { hidden } => {
                let n = image_channels * res * res;
                let dims = [n + config.time_dim, hidden, hidden, n];
                (Body::Dense(Mlp::zeros(&dims, Activation::Silu, OutputActivation::Identity)?), Vec::new())
            }
        };
        Ok(Self { res, image_channels, config, body, params })
    }

    pub fn resolution(&self) -> usize {
        self.res
    }

    pub fn image_channels(&self) -> usize {
        self.image_channels
    }

    pub fn image_len(&self) -> usize {
        self.image_channels * self.res * self.res
    }

    pub fn config(&self) -> DenoiserConfig {
        self.config
    }

    pub fn params(&self) -> &[f64] {
        match &self.body {
            Body::Conv(_) => &self.params,
            Body::Dense(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match &mut self.body {
            Body::Conv(_) => &mut self.params,
            Body::Dense(m) => m.params_mut(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().len()
    }

    /// FNV-1a over the parameter bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params() {
            for byte in p.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn forward_traced(&self, x: &[f64], t: usize) -> Result<(Vec<f64>, DenoiserTrace)> {
        if x.len() != self.image_len() {
            return Err(Error::Shape { context: "denoiser input", expected: self.image_len(), actual: x.len() });
        }
        let emb = time_embedding(t, self.config.time_dim);
        let (out, inner) = match &self.body {
            Body::Conv(net) => {
                let p = &self.params;
                let l = self.res;
                let px = l * l;
                let lh = net.conv_down.out_size(l);
                let mut a1 = net.conv_in.forward(p, x, l, l);
                add_channel_bias(&mut a1, &net.t_in.forward(p, &emb), px);
                let h1 = silu(&a1);
                let mut a2 = net.conv_down.forward(p, &h1, l, l);
                add_channel_bias(&mut a2, &net.t_down.forward(p, &emb), lh * lh);
                let h2 = silu(&a2);
                let mid = net.conv_mid.cout;
                let lq = net.conv_low.out_size(lh);
                let mut a5 = net.conv_low.forward(p, &h2, lh, lh);
                add_channel_bias(&mut a5, &net.t_low.forward(p, &emb), lq * lq);
                let h5 = silu(&a5);
                let mut a6 = net.conv_deep.forward(p, &h5, lq, lq);
                add_channel_bias(&mut a6, &net.t_deep.forward(p, &emb), lq * lq);
                let mut m = upsample(&silu(&a6), mid, lq, lh);
                m.iter_mut().zip(&h2).for_each(|(a, b)| *a += b);
                let mut a3 = net.conv_mid.forward(p, &m, lh, lh);
                add_channel_bias(&mut a3, &net.t_mid.forward(p, &emb), lh * lh);
                let u = upsample(&silu(&a3), mid, lh, l);
                let mut a4 = net.conv_up.forward(p, &u, l, l);
                add_channel_bias(&mut a4, &net.t_up.forward(p, &emb), px);
                let mut cat = silu(&a4);
                cat.extend_from_slice(&h1);
                let out = net.conv_out.forward(p, &cat, l, l);
                (out, TraceInner::Conv { a1, h1, a2, h2, a5, h5, a6, m, a3, u, a4, cat })
            }
            Body::Dense(mlp) => {
                let mut input = x.to_vec();
                input.extend_from_slice(&emb);
                let trace = mlp.forward_traced(&input)?;
                (trace.output().to_vec(), TraceInner::Dense(trace))
            }
        };
        Ok((out, DenoiserTrace { emb, input: x.to_vec(), inner }))
    }

    /// Accumulates the parameter gradient of `upstreamᵀ · output` into `grad`.
    pub fn backward(&self, trace: &DenoiserTrace, upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        if upstream.len() != self.image_len() {
            return Err(Error::Shape { context: "denoiser upstream", expected: self.image_len(), actual: upstream.len() });
        }
        if grad.len() != self.num_params() {
            return Err(Error::Shape { context: "denoiser gradient", expected: self.num_params(), actual: grad.len() });
        }
        match (&self.body, &trace.inner) {
            (Body::Conv(net), TraceInner::Conv { a1, h1, a2, h2, a5, h5, a6, m, a3, u, a4, cat }) => {
                let p = &self.params;
                let l = self.res;
                let px = l * l;
                let lh = net.conv_down.out_size(l);
                let lq = net.conv_low.out_size(lh);
                let base = net.conv_in.cout;
                let mid = net.conv_mid.cout;
                let dcat = net.conv_out.backward(p, cat, l, l, upstream, grad);
                let (dh4, dskip) = dcat.split_at(base * px);
                let da4 = silu_back(a4, dh4);
                net.t_up.backward(&trace.emb, &da4, px, grad);
                let du = net.conv_up.backward(p, u, l, l, &da4, grad);
                let da3 = silu_back(a3, &upsample_back(&du, mid, lh, l));
                net.t_mid.backward(&trace.emb, &da3, lh * lh, grad);
                // `m = h2 + up(h6)`: the gradient reaches `h2` directly and through the bottleneck.
                let mut dh2 = net.conv_mid.backward(p, m, lh, lh, &da3, grad);
                let da6 = silu_back(a6, &upsample_back(&dh2, mid, lq, lh));
                net.t_deep.backward(&trace.emb, &da6, lq * lq, grad);
                let dh5 = net.conv_deep.backward(p, h5, lq, lq, &da6, grad);
                let da5 = silu_back(a5, &dh5);
                net.t_low.backward(&trace.emb, &da5, lq * lq, grad);
                let dlow = net.conv_low.backward(p, h2, lh, lh, &da5, grad);
                dh2.iter_mut().zip(&dlow).for_each(|(a, b)| *a += b);
                let da2 = silu_back(a2, &dh2);
                net.t_down.backward(&trace.emb, &da2, lh * lh, grad);
                let mut dh1 = net.conv_down.backward(p, h1, l, l, &da2, grad);
                for (a, b) in dh1.iter_mut().zip(dskip) {
                    *a += b;
                }
                let da1 = silu_back(a1, &dh1);
                net.t_in.backward(&trace.emb, &da1, px, grad);
                net.conv_in.backward(p, &trace.input, l, l, &da1, grad);
            }
            (Body::Dense(mlp), TraceInner::Dense(t)) => {
                mlp.backward(t, upstream, Some(grad))?;
            }
            _ => return Err(Error::Config("denoiser trace does not match the network".into())),
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let ckpt = DenoiserCheckpoint {
            format: DENOISER_FORMAT.into(),
            version: 1,
            res: self.res,
            image_channels: self.image_channels,
            config: self.config,
            params: self.params().to_vec(),
        };
        fs::write(path, serde_json::to_vec(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c: DenoiserCheckpoint = serde_json::from_slice(&fs::read(path)?)?;
        if c.format != DENOISER_FORMAT || c.version != 1 {
            return Err(Error::Format(format!("unsupported denoiser {} v{}", c.format, c.version)));
        }
        let mut d = Self::zeros(c.res, c.image_channels, c.config)?;
        if c.params.len() != d.num_params() {
            return Err(Error::Shape { context: "denoiser checkpoint", expected: d.num_params(), actual: c.params.len() });
        }
        check_finite("denoiser checkpoint", &c.params)?;
        d.params_mut().copy_from_slice(&c.params);
        Ok(d)
    }
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        Ok(self.forward_traced(x, t)?.0)
    }
}

/// Training draws for one batch: per element a step and a noise array.
fn draw_batch<R: Rng + ?Sized>(n: usize, len: usize, steps: usize, rng: &mut R) -> Vec<(usize, Vec<f64>)> {
    (0..n)
        .map(|_| {
            let t = rng.random_range(1..=steps);
            let eps = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            (t, eps)
        })
        .collect()
}

fn check_batch(batch: &[Vec<f64>]) -> Result<usize> {
    let len = batch.first().map(Vec::len).ok_or_else(|| Error::Config("diffusion loss needs a nonempty batch".into()))?;
    if let Some(bad) = batch.iter().find(|x| x.len() != len) {
        return Err(Error::Shape { context: "diffusion batch", expected: len, actual: bad.len() });
    }
    Ok(len)
}

/// Mean squared error between drawn and predicted noise, averaged over every
/// element of the batch. Steps and noise come from `seed`.
pub fn diffusion_loss<P: NoisePredictor + ?Sized>(model: &P, batch: &[Vec<f64>], sched: &NoiseSchedule, seed: u64) -> Result<f64> {
    let len = check_batch(batch)?;
    let draws = draw_batch(batch.len(), len, sched.steps(), &mut ChaCha8Rng::seed_from_u64(seed));
    let mut total = 0.0;
    for (x0, (t, eps)) in batch.iter().zip(&draws) {
        let xt = q_sample(x0, *t, eps, sched)?;
        let pred = model.predict_noise(&xt, *t)?;
        total += pred.iter().zip(eps).map(|(p, e)| (p - e) * (p - e)).sum::<f64>();
    }
    Ok(total / (batch.len() * len) as f64)
}

fn loss_grad_with_draws(den: &Denoiser, batch: &[Vec<f64>], draws: &[(usize, Vec<f64>)], sched: &NoiseSchedule) -> Result<(f64, Vec<f64>)> {
    let len = den.image_len();
    let norm = (batch.len() * len) as f64;
    let mut grad = vec![0.0; den.num_params()];
    let mut total = 0.0;
    for (x0, (t, eps)) in batch.iter().zip(draws) {
        let xt = q_sample(x0, *t, eps, sched)?;
        let (pred, trace) = den.forward_traced(&xt, *t)?;
        let mut up = vec![0.0; len];
        for i in 0..len {
            let r = pred[i] - eps[i];
            total += r * r;
            up[i] = 2.0 * r / norm;
        }
        den.backward(&trace, &up, &mut grad)?;
    }
    Ok((total / norm, grad))
}

/// Value and parameter gradient of [`diffusion_loss`].
pub fn diffusion_loss_grad(den: &Denoiser, batch: &[Vec<f64>], sched: &NoiseSchedule, seed: u64) -> Result<(f64, Vec<f64>)> {
    let len = check_batch(batch)?;
    if len != den.image_len() {
        return Err(Error::Shape { context: "diffusion batch", expected: den.image_len(), actual: len });
    }
    let draws = draw_batch(batch.len(), len, sched.steps(), &mut ChaCha8Rng::seed_from_u64(seed));
    loss_grad_with_draws(den, batch, &draws, sched)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    /// Decay of the exponential moving average of the weights that becomes
    /// the returned denoiser; 0 returns the raw weights.
    pub ema_decay: f64,
    pub denoiser: DenoiserConfig,
}

impl DiffusionConfig {
    /// 100 steps; betas scaled by 10 from the 1000-step schedule so that
    /// `ᾱ_T` is near zero.
    pub fn desk() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
            epochs: 500,
            batch_size: 4,
            lr: 1e-3,
            clip: 5.0,
            ema_decay: 0.995,
            denoiser: DenoiserConfig::default(),
        }
    }

    pub fn full() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02, ..Self::desk() }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end, ScheduleKind::Linear)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.clip > 0.0) {
            return Err(Error::Config("lr and clip must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay)));
        }
        Ok(())
    }
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Trains a fresh denoiser on normalized images of side `res` with
/// `image_channels` channels. Each epoch shuffles the set and takes one Adam
/// step per minibatch; the history holds per-epoch mean losses.
pub fn train_denoiser(
    images: &[Vec<f64>],
    res: usize,
    image_channels: usize,
    cfg: &DiffusionConfig,
    seed: u64,
) -> Result<(Denoiser, Vec<f64>)> {
    cfg.validate()?;
    if images.len() < 2 {
        return Err(Error::Config("denoiser training needs at least two images".into()));
    }
    let sched = cfg.schedule()?;
    let mut den = Denoiser::new(res, image_channels, cfg.denoiser, &mut ChaCha8Rng::seed_from_u64(seed))?;
    for img in images {
        if img.len() != den.image_len() {
            return Err(Error::Shape { context: "denoiser training image", expected: den.image_len(), actual: img.len() });
        }
        check_finite("denoiser training image", img)?;
    }
    let mut adam = AdamState::new(den.num_params(), cfg.lr);
    let mut ema = den.params().to_vec();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Vec<f64>> = chunk.iter().map(|&i| images[i].clone()).collect();
            let draws = draw_batch(batch.len(), den.image_len(), sched.steps(), &mut rng);
            let (loss, grad) = loss_grad_with_draws(&den, &batch, &draws, &sched)?;
            if !loss.is_finite() {
                return Err(Error::Training { epoch, reason: "non-finite diffusion loss".into() });
            }
            adam.step(den.params_mut(), &grad).map_err(|e| Error::Training { epoch, reason: e.to_string() })?;
            // Warm-up keeps the average from remembering the random initialization.
            let n = adam.step_count as f64;
            let d = cfg.ema_decay.min((1.0 + n) / (10.0 + n));
            ema.iter_mut().zip(den.params()).for_each(|(e, p)| *e = d * *e + (1.0 - d) * p);
            sum += loss;
            count += 1;
        }
        history.push(sum / count as f64);
    }
    if cfg.ema_decay > 0.0 {
        den.params_mut().copy_from_slice(&ema);
    }
    Ok((den, history))
}

/// Runs all `T` ancestral steps from Gaussian noise and maps the result back
/// to a triplane.
pub fn generate<P: NoisePredictor + ?Sized>(model: &P, sched: &NoiseSchedule, stats: &TriplaneStats, seed: u64) -> Result<Triplane> {
    let len = stats.image_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() };
    let mut x = normal(len);
    for t in (1..=sched.steps()).rev() {
        let z = if t > 1 { normal(len) } else { vec![0.0; len] };
        x = p_sample_step(model, &x, t, sched, &z).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Sampling { step: t },
            other => other,
        })?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Sampling { step: t });
        }
    }
    stats.denormalize(&x)
}
