//! Joint fitting of decoder, template and per-shape triplanes, and
//! reconstruction of unseen shapes against frozen networks.
//!
//! The training objective for a batch of `B` samples `(i, p, s)` is
//!
//! ```text
//! L_train = L_rec + λ_reg (λ_PW L_PW + λ_L2 Σ_i L2(X_i) + λ_TV Σ_i TV(X_i))
//! L_rec   = mean |T(Φ_i(p)) - s|
//! L_PW    = sqrt(mean (T(Φ_i(p)) - s)²)            (PwMode::AsPrinted)
//!         | mean ‖Φ_i(p) - p‖                        (PwMode::Displacement)
//! ```
//!
//! where the sums over `i` run over the distinct shapes in the batch.
//! Reconstruction optimizes one fresh triplane with
//!
//! ```text
//! L = L_grid + λ_random(it) L_random + λ_Jdet L_Jdet + λ_def L_def
//! ```
//!
//! `L_grid` is the mean L1 error on a regular sub-lattice of an SDF grid,
//! `L_random` the same on random near-surface samples, and the Jacobian terms
//! are evaluated on the flowed sub-lattice. `λ_random` ramps linearly from 0
//! to its maximum over the first half of the iterations.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};
use crate::field::{
    triplane_l2, triplane_l2_grad, triplane_tv, triplane_tv_grad, Point, TemplateSdf, Triplane, VelocityDecoder,
};
use crate::flow::{
    deformation_losses_grad, flow_backward, integrate, integrate_taped, lattice_point, DeformationGrid, FieldGrad,
    FlowConfig, NeuralField, Solver,
};
use crate::geometry::SdfGrid;
use crate::diffusion::{diffusion_loss_grad, make_schedule, Denoiser, DenoiserArch, DenoiserConfig, ScheduleKind};
use crate::nets::{grad_check, Activation, AdamState, GradCheckReport, Mlp};

/// Supervision pairs `(point, signed distance)` for one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSampleSet {
    pub points: Vec<Point>,
    pub sdf: Vec<f64>,
    /// True for points drawn uniformly in the cube, false for near-surface ones.
    pub uniform: Vec<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRow {
    x: f64,
    y: f64,
    z: f64,
    sdf: f64,
    uniform: u8,
}

impl ShapeSampleSet {
    pub fn new(points: Vec<Point>, sdf: Vec<f64>, uniform: Vec<bool>) -> Result<Self> {
        for (context, len) in [("sample distances", sdf.len()), ("sample flags", uniform.len())] {
            if len != points.len() {
                return Err(Error::Shape { context, expected: points.len(), actual: len });
            }
        }
        check_finite("sample distances", &sdf)?;
        if let Some(index) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { context: "sample points", index });
        }
        Ok(Self { points, sdf, uniform })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn uniform_fraction(&self) -> f64 {
        self.uniform.iter().filter(|&&u| u).count() as f64 / self.len().max(1) as f64
    }

    pub fn near_surface_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.uniform[i]).collect()
    }

    /// CSV with header `x,y,z,sdf,uniform`; `uniform` is 0 or 1.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for i in 0..self.len() {
            let [x, y, z] = self.points[i];
            out.serialize(SampleRow { x, y, z, sdf: self.sdf[i], uniform: u8::from(self.uniform[i]) })
                .map_err(csv_error)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let (mut points, mut sdf, mut uniform) = (Vec::new(), Vec::new(), Vec::new());
        for row in reader.deserialize::<SampleRow>() {
            let row = row.map_err(csv_error)?;
            points.push([row.x, row.y, row.z]);
            sdf.push(row.sdf);
            uniform.push(match row.uniform {
                0 => false,
                1 => true,
                v => return Err(Error::Format(format!("uniform flag must be 0 or 1, got {v}"))),
            });
        }
        Self::new(points, sdf, uniform)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(fs::File::open(path)?)
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// How the point-wise regularizer is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PwMode {
    /// Root-mean-square SDF residual over the batch.
    AsPrinted,
    /// Mean deformation magnitude `‖Φ(p) - p‖`.
    Displacement,
}

/// Architecture and flow discretization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Triplane texels per side (`L`).
    pub resolution: usize,
    /// Channels per plane (`C`).
    pub channels: usize,
    pub decoder_hidden: Vec<usize>,
    pub template_hidden: Vec<usize>,
    pub decoder_activation: Activation,
    pub template_activation: Activation,
    pub use_time: bool,
    /// Solver steps used while fitting and reconstructing.
    pub flow_steps: usize,
    /// Solver steps used for meshes, registration and Jacobian checks.
    pub eval_flow_steps: usize,
    pub solver: Solver,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            resolution: 16,
            channels: 2,
            decoder_hidden: vec![32, 32],
            template_hidden: vec![64, 64, 64],
            decoder_activation: Activation::Softplus,
            template_activation: Activation::Softplus,
            use_time: true,
            flow_steps: 4,
            eval_flow_steps: 16,
            solver: Solver::Rk4,
        }
    }

    pub fn full() -> Self {
        Self {
            resolution: 96,
            channels: 4,
            decoder_hidden: vec![128; 3],
            template_hidden: vec![128; 5],
            flow_steps: 8,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        positive("resolution", self.resolution)?;
        positive("channels", self.channels)?;
        positive("flow_steps", self.flow_steps)?;
        positive("eval_flow_steps", self.eval_flow_steps)?;
        if self.decoder_hidden.contains(&0) || self.template_hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn train_flow(&self) -> FlowConfig {
        FlowConfig::forward(self.flow_steps).with_solver(self.solver)
    }

    pub fn eval_flow(&self) -> FlowConfig {
        FlowConfig::forward(self.eval_flow_steps).with_solver(self.solver)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Loss weights, schedules and batch sizes for fitting and reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_reg: f64,
    pub lambda_pw: f64,
    pub lambda_l2: f64,
    pub lambda_tv: f64,
    pub lambda_jdet: f64,
    pub lambda_def: f64,
    pub lambda_random_max: f64,
    pub pw_mode: PwMode,
    pub epochs: usize,
    /// Samples drawn per shape per optimizer step.
    pub batch_points: usize,
    pub lr_nets: f64,
    pub lr_triplane: f64,
    /// Epochs between learning-rate halvings.
    pub lr_halving_period: usize,
    pub recon_iters: usize,
    pub recon_lr: f64,
    pub recon_halving: usize,
    /// Resolution of the supervision SDF grid.
    pub recon_grid_n: usize,
    /// Sub-lattice stride; must divide `recon_grid_n - 1`.
    pub grid_step: usize,
    /// Near-surface samples per reconstruction iteration.
    pub recon_batch_points: usize,
    /// With grid supervision off, the random term is weighted by
    /// `lambda_random_max` from the first iteration.
    pub grid_supervision: bool,
    /// Adam steps fitting the template to a sphere before joint training.
    pub template_warmup_iters: usize,
    pub template_warmup_radius: f64,
    /// Initial warm-up rate, halved after each quarter of the warm-up.
    pub template_warmup_lr: f64,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            lambda_reg: 1.0,
            lambda_pw: 0.01,
            lambda_l2: 1e-5,
            lambda_tv: 1e-5,
            lambda_jdet: 10.0,
            // `def` sums over the whole lattice (tens at convergence); this
            // weight keeps far-field texels from drifting into folds.
            lambda_def: 1e-3,
            lambda_random_max: 1.0,
            pw_mode: PwMode::AsPrinted,
            epochs: 30,
            batch_points: 128,
            lr_nets: 0.002,
            lr_triplane: 0.01,
            lr_halving_period: 500,
            recon_iters: 300,
            recon_lr: 0.005,
            recon_halving: 150,
            recon_grid_n: 33,
            grid_step: 4,
            recon_batch_points: 256,
            grid_supervision: true,
            template_warmup_iters: 1000,
            template_warmup_radius: 0.55,
            template_warmup_lr: 0.01,
        }
    }

    pub fn full() -> Self {
        Self {
            epochs: 2000,
            batch_points: 1024,
            lr_nets: 0.005,
            lr_triplane: 0.001,
            recon_iters: 1600,
            recon_lr: 0.0005,
            recon_halving: 800,
            grid_step: 2,
            recon_batch_points: 1024,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_reg", self.lambda_reg),
            ("lambda_pw", self.lambda_pw),
            ("lambda_l2", self.lambda_l2),
            ("lambda_tv", self.lambda_tv),
            ("lambda_jdet", self.lambda_jdet),
            ("lambda_def", self.lambda_def),
            ("lambda_random_max", self.lambda_random_max),
        ];
        for (name, v) in lambdas {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(self.template_warmup_radius > 0.0 && self.template_warmup_radius < 1.0) {
            return Err(Error::Config(format!(
                "template_warmup_radius must lie in (0, 1), got {}",
                self.template_warmup_radius
            )));
        }
        for (name, v) in [("lr_nets", self.lr_nets), ("lr_triplane", self.lr_triplane), ("recon_lr", self.recon_lr), ("template_warmup_lr", self.template_warmup_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("batch_points", self.batch_points),
            ("lr_halving_period", self.lr_halving_period),
            ("recon_halving", self.recon_halving),
            ("grid_step", self.grid_step),
            ("recon_batch_points", self.recon_batch_points),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.recon_grid_n < 2 || (self.recon_grid_n - 1) % self.grid_step != 0 {
            return Err(Error::Config(format!(
                "grid_step {} must divide recon_grid_n - 1 = {}",
                self.grid_step,
                self.recon_grid_n.saturating_sub(1)
            )));
        }
        if (self.recon_grid_n - 1) / self.grid_step + 1 < 3 {
            return Err(Error::Config("the supervision sub-lattice needs at least 3 points per side".into()));
        }
        Ok(())
    }

    /// Points per side of the reconstruction sub-lattice.
    pub fn sublattice_n(&self) -> usize {
        (self.recon_grid_n - 1) / self.grid_step + 1
    }

    /// `λ_random` at reconstruction iteration `it`.
    pub fn lambda_random(&self, it: usize) -> f64 {
        if !self.grid_supervision {
            return self.lambda_random_max;
        }
        let half = (self.recon_iters / 2).max(1);
        self.lambda_random_max * (it as f64 / half as f64).min(1.0)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// `initial · 0.5^⌊step / period⌋`.
pub fn scheduled_lr(initial: f64, period: usize, step: usize) -> f64 {
    initial * 0.5f64.powi((step / period.max(1)) as i32)
}

/// Decoder, template and one triplane per training shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub model: ModelConfig,
    pub decoder: VelocityDecoder,
    pub template: TemplateSdf,
    pub triplanes: Vec<Triplane>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleManifest {
    format: String,
    version: u32,
    model: ModelConfig,
    shapes: usize,
}

const BUNDLE_FORMAT: &str = "diffeoshape.bundle";

impl ModelBundle {
    /// Identity-flow start: zero triplanes and a decoder with a zero output layer.
    pub fn new<R: Rng + ?Sized>(model: &ModelConfig, shapes: usize, rng: &mut R) -> Result<Self> {
        model.validate()?;
        let decoder =
            VelocityDecoder::new(model.channels, &model.decoder_hidden, model.decoder_activation, model.use_time, rng)?;
        let template = TemplateSdf::new(&model.template_hidden, model.template_activation, rng)?;
        let triplanes = (0..shapes)
            .map(|_| Triplane::zeros(model.resolution, model.channels))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { model: model.clone(), decoder, template, triplanes })
    }

    pub fn field(&self, shape: usize) -> NeuralField<'_> {
        NeuralField::new(&self.triplanes[shape], &self.decoder)
    }

    pub fn fresh_triplane(&self) -> Result<Triplane> {
        Triplane::zeros(self.model.resolution, self.model.channels)
    }

    fn check_shape(&self, shape: usize) -> Result<()> {
        if shape >= self.triplanes.len() {
            return Err(Error::Index { index: shape, max: self.triplanes.len().saturating_sub(1) });
        }
        Ok(())
    }

    /// Parameters stacked as `[decoder, template, triplane 0, triplane 1, ...]`.
    pub fn to_params(&self) -> Vec<f64> {
        let mut out = self.decoder.net.params().to_vec();
        out.extend_from_slice(self.template.net.params());
        for tp in &self.triplanes {
            out.extend_from_slice(tp.data());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let expected = self.num_params();
        if params.len() != expected {
            return Err(Error::Shape { context: "stacked bundle parameters", expected, actual: params.len() });
        }
        let mut off = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&params[off..off + dst.len()]);
            off += dst.len();
        };
        take(self.decoder.net.params_mut());
        take(self.template.net.params_mut());
        for tp in &mut self.triplanes {
            take(tp.data_mut());
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.decoder.net.num_params()
            + self.template.net.num_params()
            + self.triplanes.iter().map(|t| t.data().len()).sum::<usize>()
    }

    /// Directory layout: `bundle.json`, `decoder.json`, `template.json` and
    /// `triplanes/NNNN.tpln`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("triplanes"))?;
        let manifest = BundleManifest {
            format: BUNDLE_FORMAT.into(),
            version: 1,
            model: self.model.clone(),
            shapes: self.triplanes.len(),
        };
        fs::write(dir.join("bundle.json"), serde_json::to_vec_pretty(&manifest)?)?;
        self.decoder.net.save(dir.join("decoder.json"))?;
        self.template.net.save(dir.join("template.json"))?;
        for (i, tp) in self.triplanes.iter().enumerate() {
            tp.save(dir.join("triplanes").join(format!("{i:04}.tpln")))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: BundleManifest = serde_json::from_slice(&fs::read(dir.join("bundle.json"))?)?;
        if manifest.format != BUNDLE_FORMAT || manifest.version != 1 {
            return Err(Error::Format(format!("unsupported bundle {} v{}", manifest.format, manifest.version)));
        }
        let decoder = VelocityDecoder::from_net(Mlp::load(dir.join("decoder.json"))?, manifest.model.use_time)?;
        let template = TemplateSdf::from_net(Mlp::load(dir.join("template.json"))?)?;
        let triplanes = (0..manifest.shapes)
            .map(|i| Triplane::load(dir.join("triplanes").join(format!("{i:04}.tpln"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { model: manifest.model, decoder, template, triplanes })
    }
}

/// Predicted signed distance `T(Φ_i(p))` using the training flow.
pub fn predict_sdf(bundle: &ModelBundle, shape: usize, p: Point) -> Result<f64> {
    bundle.check_shape(shape)?;
    let q = integrate(&bundle.field(shape), p, &bundle.model.train_flow())?;
    bundle.template.sdf(q)
}

/// One supervision sample of a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePoint {
    pub shape: usize,
    pub point: Point,
    pub sdf: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub rec: f64,
    pub pw: f64,
    pub l2: f64,
    pub tv: f64,
    /// `λ_PW L_PW + λ_L2 L_L2 + λ_TV L_TV`.
    pub reg: f64,
    pub total: f64,
}

/// Gradients in the layout of the bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleGrad {
    pub decoder: Vec<f64>,
    pub template: Vec<f64>,
    pub triplanes: Vec<Vec<f64>>,
}

impl BundleGrad {
    pub fn zeros(bundle: &ModelBundle) -> Self {
        Self {
            decoder: vec![0.0; bundle.decoder.net.num_params()],
            template: vec![0.0; bundle.template.net.num_params()],
            triplanes: bundle.triplanes.iter().map(|t| vec![0.0; t.data().len()]).collect(),
        }
    }

    /// Stacked in the order of [`ModelBundle::to_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.decoder.clone();
        out.extend_from_slice(&self.template);
        for t in &self.triplanes {
            out.extend_from_slice(t);
        }
        out
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn batch_shapes(bundle: &ModelBundle, batch: &[SamplePoint]) -> Result<Vec<usize>> {
    if batch.is_empty() {
        return Err(Error::Config("loss needs a nonempty batch".into()));
    }
    let mut shapes: Vec<usize> = batch.iter().map(|s| s.shape).collect();
    shapes.sort_unstable();
    shapes.dedup();
    for &s in &shapes {
        bundle.check_shape(s)?;
    }
    Ok(shapes)
}

/// Predictions and flowed points for a batch.
fn forward_batch(bundle: &ModelBundle, batch: &[SamplePoint]) -> Result<Vec<(Point, f64)>> {
    let flow = bundle.model.train_flow();
    batch
        .iter()
        .map(|s| {
            let q = integrate(&bundle.field(s.shape), s.point, &flow)?;
            Ok((q, bundle.template.sdf(q)?))
        })
        .collect()
}

fn assemble_terms(bundle: &ModelBundle, shapes: &[usize], rec: f64, pw: f64, cfg: &TrainConfig) -> LossTerms {
    let l2: f64 = shapes.iter().map(|&s| triplane_l2(&bundle.triplanes[s])).sum();
    let tv: f64 = shapes.iter().map(|&s| triplane_tv(&bundle.triplanes[s])).sum();
    let reg = cfg.lambda_pw * pw + cfg.lambda_l2 * l2 + cfg.lambda_tv * tv;
    LossTerms { rec, pw, l2, tv, reg, total: rec + cfg.lambda_reg * reg }
}

fn pw_value(mode: PwMode, batch: &[SamplePoint], fwd: &[(Point, f64)]) -> f64 {
    let b = batch.len() as f64;
    match mode {
        PwMode::AsPrinted => {
            (batch.iter().zip(fwd).map(|(s, (_, pred))| (pred - s.sdf).powi(2)).sum::<f64>() / b).sqrt()
        }
        PwMode::Displacement => batch
            .iter()
            .zip(fwd)
            .map(|(s, (q, _))| ((q[0] - s.point[0]).powi(2) + (q[1] - s.point[1]).powi(2) + (q[2] - s.point[2]).powi(2)).sqrt())
            .sum::<f64>()
            / b,
    }
}

/// Mean absolute SDF error over the batch.
pub fn loss_rec(bundle: &ModelBundle, batch: &[SamplePoint]) -> Result<f64> {
    batch_shapes(bundle, batch)?;
    let fwd = forward_batch(bundle, batch)?;
    Ok(batch.iter().zip(&fwd).map(|(s, (_, pred))| (pred - s.sdf).abs()).sum::<f64>() / batch.len() as f64)
}

/// `λ_PW L_PW + λ_L2 L_L2 + λ_TV L_TV`.
pub fn loss_reg(bundle: &ModelBundle, batch: &[SamplePoint], cfg: &TrainConfig) -> Result<f64> {
    Ok(loss_train(bundle, batch, cfg)?.reg)
}

pub fn loss_train(bundle: &ModelBundle, batch: &[SamplePoint], cfg: &TrainConfig) -> Result<LossTerms> {
    let shapes = batch_shapes(bundle, batch)?;
    let fwd = forward_batch(bundle, batch)?;
    let rec = batch.iter().zip(&fwd).map(|(s, (_, pred))| (pred - s.sdf).abs()).sum::<f64>() / batch.len() as f64;
    let pw = pw_value(cfg.pw_mode, batch, &fwd);
    Ok(assemble_terms(bundle, &shapes, rec, pw, cfg))
}

/// Value and exact gradient of [`loss_train`].
pub fn loss_train_grad(bundle: &ModelBundle, batch: &[SamplePoint], cfg: &TrainConfig) -> Result<(LossTerms, BundleGrad)> {
    let shapes = batch_shapes(bundle, batch)?;
    let b = batch.len() as f64;
    let flow = bundle.model.train_flow();
    let w_pw = cfg.lambda_reg * cfg.lambda_pw;
    // The RMS term couples every sample, so every forward pass finishes
    // before the first reverse pass starts.
    let mut taped = Vec::with_capacity(batch.len());
    let (mut rec, mut sq, mut disp) = (0.0, 0.0, 0.0);
    for s in batch {
        let (q, tape) = integrate_taped(&bundle.field(s.shape), s.point, &flow)?;
        let (pred, trace) = bundle.template.sdf_traced(q)?;
        let r = pred - s.sdf;
        rec += r.abs() / b;
        sq += r * r / b;
        let d = [q[0] - s.point[0], q[1] - s.point[1], q[2] - s.point[2]];
        let dn = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        disp += dn / b;
        taped.push((tape, trace, r, d, dn));
    }
    let rms = sq.sqrt();
    let mut grad = BundleGrad::zeros(bundle);
    for (s, (tape, trace, r, d, dn)) in batch.iter().zip(taped) {
        let mut up = sign0(r) / b;
        if cfg.pw_mode == PwMode::AsPrinted && w_pw > 0.0 && rms > 0.0 {
            up += w_pw * r / (b * rms);
        }
        let mut gq = bundle.template.backward(&trace, up, Some(&mut grad.template))?;
        if cfg.pw_mode == PwMode::Displacement && w_pw > 0.0 && dn > 0.0 {
            for k in 0..3 {
                gq[k] += w_pw * d[k] / (dn * b);
            }
        }
        let mut sink = FieldGrad { triplane: Some(&mut grad.triplanes[s.shape]), decoder: Some(&mut grad.decoder) };
        flow_backward(&bundle.field(s.shape), &tape, gq, &mut sink)?;
    }
    for &s in &shapes {
        triplane_l2_grad(&bundle.triplanes[s], cfg.lambda_reg * cfg.lambda_l2, &mut grad.triplanes[s]);
        triplane_tv_grad(&bundle.triplanes[s], cfg.lambda_reg * cfg.lambda_tv, &mut grad.triplanes[s]);
    }
    let pw = match cfg.pw_mode {
        PwMode::AsPrinted => rms,
        PwMode::Displacement => disp,
    };
    Ok((assemble_terms(bundle, &shapes, rec, pw, cfg), grad))
}

/// Per-epoch means of the training losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_rec: f64,
    pub loss_pw: f64,
    pub loss_l2: f64,
    pub loss_tv: f64,
    pub lr_nets: f64,
    pub lr_triplane: f64,
}

/// Resumable optimizer state for [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub bundle: ModelBundle,
    pub cfg: TrainConfig,
    pub seed: u64,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    adam_decoder: AdamState,
    adam_template: AdamState,
    adam_triplanes: Vec<AdamState>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainerCheckpoint {
    format: String,
    version: u32,
    cfg: TrainConfig,
    seed: u64,
    epoch: usize,
    history: Vec<EpochRecord>,
    adam_decoder: AdamState,
    adam_template: AdamState,
    adam_triplanes: Vec<AdamState>,
}

const TRAINER_FORMAT: &str = "diffeoshape.trainer";

impl Trainer {
    pub fn new(shapes: usize, model: &ModelConfig, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if shapes == 0 {
            return Err(Error::Config("training needs at least one shape".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bundle = ModelBundle::new(model, shapes, &mut rng)?;
        warm_start_template(&mut bundle.template, cfg, &mut rng)?;
        let adam_decoder = AdamState::new(bundle.decoder.net.num_params(), cfg.lr_nets);
        let adam_template = AdamState::new(bundle.template.net.num_params(), cfg.lr_nets);
        let adam_triplanes = bundle.triplanes.iter().map(|t| AdamState::new(t.data().len(), cfg.lr_triplane)).collect();
        Ok(Self { bundle, cfg: cfg.clone(), seed, epoch: 0, history: Vec::new(), adam_decoder, adam_template, adam_triplanes })
    }

    /// Runs one epoch: every shape's samples are shuffled and consumed in
    /// slices of `batch_points`; each step batches one slice per shape.
    pub fn step_epoch(&mut self, shapes: &[ShapeSampleSet]) -> Result<EpochRecord> {
        if shapes.len() != self.bundle.triplanes.len() {
            return Err(Error::Shape { context: "training shapes", expected: self.bundle.triplanes.len(), actual: shapes.len() });
        }
        let min_len = shapes.iter().map(ShapeSampleSet::len).min().unwrap_or(0);
        if min_len == 0 {
            return Err(Error::Config("every training shape needs samples".into()));
        }
        let epoch = self.epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64 + 1);
        let perms: Vec<Vec<usize>> = shapes
            .iter()
            .map(|s| {
                let mut idx: Vec<usize> = (0..s.len()).collect();
                idx.shuffle(&mut rng);
                idx
            })
            .collect();
        let lr_nets = scheduled_lr(self.cfg.lr_nets, self.cfg.lr_halving_period, epoch);
        let lr_tp = scheduled_lr(self.cfg.lr_triplane, self.cfg.lr_halving_period, epoch);
        self.adam_decoder.lr = lr_nets;
        self.adam_template.lr = lr_nets;
        for a in &mut self.adam_triplanes {
            a.lr = lr_tp;
        }
        let bp = self.cfg.batch_points;
        let steps = min_len.div_ceil(bp);
        let mut sum = LossTerms::default();
        for step in 0..steps {
            let mut batch = Vec::with_capacity(bp * shapes.len());
            for (si, (set, perm)) in shapes.iter().zip(&perms).enumerate() {
                for &i in &perm[step * bp..((step + 1) * bp).min(min_len)] {
                    batch.push(SamplePoint { shape: si, point: set.points[i], sdf: set.sdf[i] });
                }
            }
            let (terms, grad) = loss_train_grad(&self.bundle, &batch, &self.cfg)?;
            if !terms.total.is_finite() {
                return Err(Error::Training { epoch, reason: format!("non-finite loss at step {step}") });
            }
            let fail = |e: Error| Error::Training { epoch, reason: e.to_string() };
            self.adam_decoder.step(self.bundle.decoder.net.params_mut(), &grad.decoder).map_err(fail)?;
            self.adam_template.step(self.bundle.template.net.params_mut(), &grad.template).map_err(fail)?;
            for ((tp, adam), g) in self.bundle.triplanes.iter_mut().zip(&mut self.adam_triplanes).zip(&grad.triplanes) {
                adam.step(tp.data_mut(), g).map_err(fail)?;
            }
            sum.total += terms.total;
            sum.rec += terms.rec;
            sum.pw += terms.pw;
            sum.l2 += terms.l2;
            sum.tv += terms.tv;
        }
        let n = steps as f64;
        let record = EpochRecord {
            epoch,
            loss_total: sum.total / n,
            loss_rec: sum.rec / n,
            loss_pw: sum.pw / n,
            loss_l2: sum.l2 / n,
            loss_tv: sum.tv / n,
            lr_nets,
            lr_triplane: lr_tp,
        };
        self.history.push(record);
        self.epoch += 1;
        Ok(record)
    }

    /// Trains until `self.epoch == epochs`.
    pub fn run(&mut self, shapes: &[ShapeSampleSet], epochs: usize) -> Result<()> {
        while self.epoch < epochs {
            self.step_epoch(shapes)?;
        }
        Ok(())
    }

    /// Writes the bundle plus `trainer.json` (optimizer moments, epoch, history).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.bundle.save(dir)?;
        let ckpt = TrainerCheckpoint {
            format: TRAINER_FORMAT.into(),
            version: 1,
            cfg: self.cfg.clone(),
            seed: self.seed,
            epoch: self.epoch,
            history: self.history.clone(),
            adam_decoder: self.adam_decoder.clone(),
            adam_template: self.adam_template.clone(),
            adam_triplanes: self.adam_triplanes.clone(),
        };
        fs::write(dir.join("trainer.json"), serde_json::to_vec(&ckpt)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let bundle = ModelBundle::load(dir)?;
        let c: TrainerCheckpoint = serde_json::from_slice(&fs::read(dir.join("trainer.json"))?)?;
        if c.format != TRAINER_FORMAT || c.version != 1 {
            return Err(Error::Format(format!("unsupported trainer state {} v{}", c.format, c.version)));
        }
        Ok(Self {
            bundle,
            cfg: c.cfg,
            seed: c.seed,
            epoch: c.epoch,
            history: c.history,
            adam_decoder: c.adam_decoder,
            adam_template: c.adam_template,
            adam_triplanes: c.adam_triplanes,
        })
    }
}

/// Fits the template to the sphere of radius `cfg.template_warmup_radius` on
/// uniform points with the L1 loss.
pub fn warm_start_template<R: Rng + ?Sized>(template: &mut TemplateSdf, cfg: &TrainConfig, rng: &mut R) -> Result<()> {
    let iters = cfg.template_warmup_iters;
    let mut adam = AdamState::new(template.net.num_params(), cfg.template_warmup_lr);
    let batch = cfg.batch_points.max(64);
    let mut grad = vec![0.0; template.net.num_params()];
    for it in 0..iters {
        adam.lr = scheduled_lr(cfg.template_warmup_lr, iters.div_ceil(4), it);
        grad.iter_mut().for_each(|g| *g = 0.0);
        for _ in 0..batch {
            let p: Point = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let target = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - cfg.template_warmup_radius;
            let (pred, trace) = template.sdf_traced(p)?;
            template.backward(&trace, sign0(pred - target) / batch as f64, Some(&mut grad))?;
        }
        adam.step(template.net.params_mut(), &grad)?;
    }
    Ok(())
}

/// Trains a fresh bundle on `shapes` for `cfg.epochs` epochs.
pub fn fit(shapes: &[ShapeSampleSet], model: &ModelConfig, cfg: &TrainConfig, seed: u64) -> Result<(ModelBundle, Vec<EpochRecord>)> {
    let mut trainer = Trainer::new(shapes.len(), model, cfg, seed)?;
    trainer.run(shapes, cfg.epochs)?;
    Ok((trainer.bundle, trainer.history))
}

/// Losses of one reconstruction iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconRecord {
    pub iter: usize,
    pub total: f64,
    pub grid: f64,
    pub random: f64,
    pub lambda_random: f64,
    pub jdet: f64,
    pub def: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub triplane: Triplane,
    pub history: Vec<ReconRecord>,
    /// Losses at the returned triplane, with the random term over every
    /// near-surface sample and `λ_random` at its maximum.
    pub final_losses: ReconRecord,
}

/// Supervision sub-lattice: points, and target values when a grid is given.
struct Lattice {
    n: usize,
    points: Vec<Point>,
    targets: Option<Vec<f64>>,
}

impl Lattice {
    fn new(grid: Option<&SdfGrid>, cfg: &TrainConfig) -> Result<Self> {
        match grid {
            Some(g) if cfg.grid_supervision => {
                if g.n() != cfg.recon_grid_n {
                    return Err(Error::Config(format!(
                        "supervision grid has N = {}, config expects {}",
                        g.n(),
                        cfg.recon_grid_n
                    )));
                }
                let (n, points, values) = g.downsample(cfg.grid_step)?;
                Ok(Self { n, points, targets: Some(values) })
            }
            None if cfg.grid_supervision => Err(Error::Config("grid supervision needs an SDF grid".into())),
            _ => {
                let n = cfg.sublattice_n();
                Ok(Self { n, points: (0..n * n * n).map(|i| lattice_point(n, i)).collect(), targets: None })
            }
        }
    }
}

/// Loss terms for one triplane. With `grad` set, also accumulates the
/// triplane gradient of the weighted total.
fn recon_step(
    bundle: &ModelBundle,
    tp: &Triplane,
    lattice: &Lattice,
    random: &[(Point, f64)],
    lambda_random: f64,
    cfg: &TrainConfig,
    mut grad: Option<&mut [f64]>,
) -> Result<ReconRecord> {
    let field = NeuralField::new(tp, &bundle.decoder);
    let flow = bundle.model.train_flow();
    let m3 = lattice.points.len();
    let mut rec = ReconRecord { lambda_random, ..ReconRecord::default() };

    let mut tapes = Vec::with_capacity(if grad.is_some() { m3 } else { 0 });
    let mut positions = Vec::with_capacity(m3);
    let mut grid_up = vec![[0.0; 3]; m3];
    for (idx, &p) in lattice.points.iter().enumerate() {
        let q = if grad.is_some() {
            let (q, tape) = integrate_taped(&field, p, &flow)?;
            tapes.push(tape);
            q
        } else {
            integrate(&field, p, &flow)?
        };
        positions.push(q);
        if let Some(targets) = &lattice.targets {
            let (pred, trace) = bundle.template.sdf_traced(q)?;
            let r = pred - targets[idx];
            rec.grid += r.abs() / m3 as f64;
            if grad.is_some() {
                grid_up[idx] = bundle.template.backward(&trace, sign0(r) / m3 as f64, None)?;
            }
        }
    }
    let dg = DeformationGrid::from_positions(lattice.n, positions)?;
    let (jdet, def, dgrad) = deformation_losses_grad(&dg, cfg.lambda_jdet, cfg.lambda_def);
    rec.jdet = jdet;
    rec.def = def;
    if let Some(g) = grad.as_deref_mut() {
        for (idx, tape) in tapes.iter().enumerate() {
            let u = grid_up[idx];
            let up = [u[0] + dgrad[idx][0], u[1] + dgrad[idx][1], u[2] + dgrad[idx][2]];
            flow_backward(&field, tape, up, &mut FieldGrad { triplane: Some(&mut *g), decoder: None })?;
        }
    }

    if lambda_random > 0.0 && !random.is_empty() {
        let b = random.len() as f64;
        for &(p, target) in random {
            if let Some(g) = grad.as_deref_mut() {
                let (q, tape) = integrate_taped(&field, p, &flow)?;
                let (pred, trace) = bundle.template.sdf_traced(q)?;
                let r = pred - target;
                rec.random += r.abs() / b;
                let gq = bundle.template.backward(&trace, lambda_random * sign0(r) / b, None)?;
                flow_backward(&field, &tape, gq, &mut FieldGrad { triplane: Some(&mut *g), decoder: None })?;
            } else {
                let pred = bundle.template.sdf(integrate(&field, p, &flow)?)?;
                rec.random += (pred - target).abs() / b;
            }
        }
    }
    rec.total = rec.grid + lambda_random * rec.random + cfg.lambda_jdet * rec.jdet + cfg.lambda_def * rec.def;
    Ok(rec)
}

/// Fits a fresh triplane to an unseen shape with the bundle's networks
/// frozen. `grid` supplies ground-truth values for grid supervision and must
/// have `cfg.recon_grid_n` points per side.
pub fn reconstruct(
    bundle: &ModelBundle,
    samples: &ShapeSampleSet,
    grid: Option<&SdfGrid>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Reconstruction> {
    cfg.validate()?;
    let lattice = Lattice::new(grid, cfg)?;
    let near = samples.near_surface_indices();
    let pool: Vec<usize> = if near.is_empty() { (0..samples.len()).collect() } else { near };
    if pool.is_empty() && cfg.lambda_random_max > 0.0 {
        return Err(Error::Config("reconstruction needs samples for the random term".into()));
    }
    let mut tp = bundle.fresh_triplane()?;
    let mut adam = AdamState::new(tp.data().len(), cfg.recon_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = Vec::with_capacity(cfg.recon_iters);
    for it in 0..cfg.recon_iters {
        let lambda_random = cfg.lambda_random(it);
        let random: Vec<(Point, f64)> = if lambda_random > 0.0 {
            (0..cfg.recon_batch_points)
                .map(|_| {
                    let i = pool[rng.random_range(0..pool.len())];
                    (samples.points[i], samples.sdf[i])
                })
                .collect()
        } else {
            Vec::new()
        };
        let mut grad = vec![0.0; tp.data().len()];
        let mut rec = recon_step(bundle, &tp, &lattice, &random, lambda_random, cfg, Some(&mut grad))?;
        if !rec.total.is_finite() {
            return Err(Error::Training { epoch: it, reason: "non-finite reconstruction loss".into() });
        }
        rec.iter = it;
        rec.lr = scheduled_lr(cfg.recon_lr, cfg.recon_halving, it);
        adam.lr = rec.lr;
        adam.step(tp.data_mut(), &grad).map_err(|e| Error::Training { epoch: it, reason: e.to_string() })?;
        history.push(rec);
    }
    let all: Vec<(Point, f64)> = pool.iter().map(|&i| (samples.points[i], samples.sdf[i])).collect();
    let lambda_final = cfg.lambda_random_max;
    let mut final_losses = recon_step(bundle, &tp, &lattice, &all, lambda_final, cfg, None)?;
    final_losses.iter = cfg.recon_iters;
    Ok(Reconstruction { triplane: tp, history, final_losses })
}

/// Mean `‖Φ(p) - p‖` over the `n³` lattice.
pub fn mean_grid_displacement(tp: &Triplane, decoder: &VelocityDecoder, n: usize, flow: &FlowConfig) -> Result<f64> {
    let field = NeuralField::new(tp, decoder);
    let mut total = 0.0;
    for idx in 0..n * n * n {
        let p = lattice_point(n, idx);
        let q = integrate(&field, p, flow)?;
        total += ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2)).sqrt();
    }
    Ok(total / (n * n * n) as f64)
}

/// Writes serializable records as CSV with a header row.
pub fn write_history_csv<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in records {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Fixture seed of the reference gradient suite.
pub const GRAD_SUITE_SEED: u64 = 11;

/// One entry of [`grad_suite`].
#[derive(Debug, Clone)]
pub struct GradSuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

/// Finite-difference checks of every training, reconstruction and diffusion
/// loss on small random instances: triplanes with `L = 8`, `C = 2`, a `5³`
/// deformation lattice and a conv denoiser over `L = 8` images.
///
/// The field is piecewise bilinear, so the loss is only piecewise smooth; an
/// instance is checkable only where no cell boundary falls inside the stencil.
/// [`GRAD_SUITE_SEED`] is such an instance. Over seeds 0..48, 44 pass at these
/// steps; the rest straddle a boundary on the folded instance, where the
/// numeric derivative stops converging as `h` shrinks.
pub fn grad_suite(seed: u64) -> Result<Vec<GradSuiteEntry>> {
    // Gentle instances have gradients near the relative-error floor, where a
    // larger step keeps round-off down; the folded flow is strongly curved and
    // needs a small one.
    const H: f64 = 1e-5;
    const H_FOLDED: f64 = 1e-7;
    const FOLD_GAIN: f64 = 3.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ModelConfig {
        resolution: 8,
        channels: 2,
        decoder_hidden: vec![8],
        template_hidden: vec![8, 8],
        flow_steps: 2,
        ..ModelConfig::desk()
    };
    let mut bundle = ModelBundle::new(&model, 2, &mut rng)?;
    for p in bundle.decoder.net.params_mut() {
        *p = rng.random_range(-0.5..0.5);
    }
    // Golden-ratio staircase: memory neighbours differ by frac(c·φ) and row
    // neighbours by frac(L·c·φ), both far from 0 and 1, so no
    // finite-difference step crosses a kink of the TV term.
    let golden = (5f64.sqrt() - 1.0) / 2.0;
    for tp in &mut bundle.triplanes {
        let phase: f64 = rng.random();
        for (k, v) in tp.data_mut().iter_mut().enumerate() {
            *v = 0.6 * ((k as f64 * golden + phase).fract() - 0.5);
        }
    }
    let batch: Vec<SamplePoint> = (0..6)
        .map(|i| SamplePoint {
            shape: i % 2,
            point: [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)],
            sdf: rng.random_range(-0.5..0.5),
        })
        .collect();

    let mut out = Vec::new();
    let zero_reg = TrainConfig { lambda_pw: 0.0, lambda_l2: 0.0, lambda_tv: 0.0, ..TrainConfig::desk() };
    let train_cases: [(&'static str, TrainConfig); 5] = [
        ("reconstruction L1", TrainConfig { lambda_reg: 0.0, ..zero_reg.clone() }),
        ("point-wise (as printed)", TrainConfig { lambda_pw: 0.5, ..zero_reg.clone() }),
        ("point-wise (displacement)", TrainConfig { lambda_pw: 0.5, pw_mode: PwMode::Displacement, ..zero_reg.clone() }),
        ("triplane L2", TrainConfig { lambda_l2: 0.05, ..zero_reg.clone() }),
        ("triplane TV", TrainConfig { lambda_tv: 0.05, ..zero_reg.clone() }),
    ];
    let params = bundle.to_params();
    for (name, cfg) in train_cases {
        let mut work = bundle.clone();
        let report = grad_check(
            |p| {
                work.set_params(p)?;
                let (terms, g) = loss_train_grad(&work, &batch, &cfg)?;
                Ok((terms.total, g.flatten()))
            },
            &params,
            H,
        )?;
        out.push(GradSuiteEntry { name, report });
    }

    // A stronger decoder and larger features, so that some lattice cells
    // fold and the Jacobian penalty is active.
    let mut bundle = bundle;
    for p in bundle.decoder.net.params_mut() {
        *p *= FOLD_GAIN;
    }
    let mut tp = bundle.triplanes[0].clone();
    for v in tp.data_mut() {
        *v *= 4.0;
    }
    let shape = crate::geometry::AnalyticShape::ellipsoid([0.5, 0.4, 0.3]);
    let grid = crate::geometry::eval_sdf_grid(|p| Ok(shape.sdf(p)), 5)?;
    let random: Vec<(Point, f64)> = (0..8)
        .map(|_| {
            let p = [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)];
            (p, shape.sdf(p))
        })
        .collect();
    let base = TrainConfig { recon_grid_n: 5, grid_step: 1, lambda_jdet: 0.0, lambda_def: 0.0, ..TrainConfig::desk() };
    let recon_cases: [(&'static str, TrainConfig, f64); 4] = [
        ("Jacobian determinant", TrainConfig { lambda_jdet: 3.0, grid_supervision: false, ..base.clone() }, 0.0),
        ("deformation", TrainConfig { lambda_def: 0.2, grid_supervision: false, ..base.clone() }, 0.0),
        ("reconstruction grid + random", base.clone(), 0.7),
        ("reconstruction total", TrainConfig { lambda_jdet: 3.0, lambda_def: 0.2, ..base.clone() }, 0.7),
    ];
    for (name, cfg, lambda_random) in recon_cases {
        let lattice = Lattice::new(Some(&grid), &cfg)?;
        let report = grad_check(
            |p| {
                let t = Triplane::from_data(tp.resolution(), tp.channels(), p.to_vec())?;
                let mut g = vec![0.0; p.len()];
                let r = recon_step(&bundle, &t, &lattice, &random, lambda_random, &cfg, Some(&mut g))?;
                Ok((r.total, g))
            },
            tp.data(),
            H_FOLDED,
        )?;
        out.push(GradSuiteEntry { name, report });
    }

    let arch = DenoiserConfig { arch: DenoiserArch::Conv { base: 4, mid: 4 }, time_dim: 8 };
    let mut den = Denoiser::new(8, 6, arch, &mut rng)?;
    for p in den.params_mut() {
        *p += rng.random_range(-0.2..0.2);
    }
    let sched = make_schedule(10, 1e-3, 0.2, ScheduleKind::Linear)?;
    let images: Vec<Vec<f64>> = (0..2).map(|_| (0..den.image_len()).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let params = den.params().to_vec();
    let mut work = den.clone();
    let report = grad_check(
        |p| {
            work.params_mut().copy_from_slice(p);
            diffusion_loss_grad(&work, &images, &sched, seed)
        },
        &params,
        H,
    )?;
    out.push(GradSuiteEntry { name: "diffusion noise prediction", report });
    Ok(out)
}
