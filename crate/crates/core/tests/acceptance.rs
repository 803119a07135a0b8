//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any selected criterion fails.
//!
//! `DIFFEOSHAPE_ACCEPTANCE=1,2,6` restricts the run to the listed criteria;
//! 3, 4, 5 and 7 share one trained desk model.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use diffeoshape::diffusion::{
    diffusion_loss, generate, make_schedule, p_sample_step, q_sample, train_denoiser, DiffusionConfig, NoisePredictor, ScheduleKind,
    TriplaneStats,
};
use diffeoshape::evalgen::{degenerate_set, fit_stats, frechet_distance, precision_recall, shape_descriptor, Descriptor, GaussianStats};
use diffeoshape::field::{Point, Triplane, VelocityDecoder};
use diffeoshape::flow::{integrate, FlowConfig, LinearField, NeuralField};
use diffeoshape::geometry::{
    chamfer, eval_sdf_grid, ground_truth_mesh, normal_consistency, register_with_field, sample_sdf, self_intersections,
    self_intersections_brute_force, template_mesh, topology_report, AnalyticShape, EllipsoidFamily, SampleSpec, TopologyReport, TriMesh,
};
use diffeoshape::nets::Activation;
use diffeoshape::training::{
    grad_suite, reconstruct, ModelBundle, ModelConfig, ShapeSampleSet, TrainConfig, Trainer, GRAD_SUITE_SEED,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

const TRAIN_SHAPES: usize = 20;
const HELD_OUT: usize = 5;
const JACOBIAN_N: usize = 32;
const TEMPLATE_VERTICES: usize = 5000;
const TEMPLATE_RESOLUTION: usize = 64;
const GT_RESOLUTION: usize = 96;
const GT_SMOOTHING: usize = 10;
const METRIC_SAMPLES: usize = 30_000;
const GENERATED: usize = 10;

fn main() -> ExitCode {
    let selected: BTreeSet<u32> = match std::env::var("DIFFEOSHAPE_ACCEPTANCE") {
        Ok(list) => list.split(',').filter_map(|s| s.trim().parse().ok()).collect(),
        Err(_) => (1..=8).collect(),
    };
    let mut all_pass = true;
    let mut report = |n: u32, started: Instant, outcome: Outcome| {
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok((pass, detail)) => {
                all_pass &= pass;
                println!("criterion {n}: {} ({secs:.1}s) {detail}", if pass { "PASS" } else { "FAIL" });
            }
            Err(e) => {
                all_pass = false;
                println!("criterion {n}: FAIL ({secs:.1}s) error: {e}");
            }
        }
    };
    for (n, check) in [(1, grad_suite_check as fn() -> Outcome), (2, flow_check), (6, ddpm_check), (8, metrics_check)] {
        if selected.contains(&n) {
            let t = Instant::now();
            report(n, t, check());
        }
    }
    if [3, 4, 5, 7].iter().any(|n| selected.contains(n)) {
        let t = Instant::now();
        match DeskRun::train() {
            Ok(mut run) => {
                let t3 = Instant::now();
                let recon = run.reconstruct_held_out(true);
                if selected.contains(&3) {
                    report(3, t, recon.as_ref().map_err(|e| e.to_string().into()).and_then(|r| run.topology(r, t.elapsed().as_secs_f64())));
                }
                let quality = recon.as_ref().map_err(|e| e.to_string().into()).and_then(|r| run.quality(r));
                if selected.contains(&4) {
                    report(4, t3, quality.as_ref().map(|q| q.0.clone()).map_err(|e| e.to_string().into()));
                }
                if selected.contains(&5) {
                    let t5 = Instant::now();
                    let out = match &quality {
                        Ok((_, mean)) => run.ablation(*mean),
                        Err(e) => Err(e.to_string().into()),
                    };
                    report(5, t5, out);
                }
                if selected.contains(&7) {
                    let t7 = Instant::now();
                    report(7, t7, run.generation());
                }
            }
            Err(e) => {
                for n in [3, 4, 5, 7].into_iter().filter(|n| selected.contains(n)) {
                    report(n, t, Err(format!("desk training failed: {e}").into()));
                }
            }
        }
    }
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn grad_suite_check() -> Outcome {
    let t = Instant::now();
    let suite = grad_suite(GRAD_SUITE_SEED)?;
    let secs = t.elapsed().as_secs_f64();
    let worst = suite.iter().max_by(|a, b| a.report.max_relative_error.total_cmp(&b.report.max_relative_error)).ok_or("empty suite")?;
    let names: Vec<&str> = suite.iter().map(|e| e.name).collect();
    let pass = suite.iter().all(|e| e.report.passes(1e-4)) && secs < 120.0;
    Ok((pass, format!("{} losses {names:?}; worst {} at {:.2e}", suite.len(), worst.name, worst.report.max_relative_error)))
}

type Mat = [[f64; 3]; 3];

fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// Taylor series of `exp(A)`; 40 terms are exact to round-off for `‖A‖ ≤ 1`.
fn expm(a: &Mat) -> Mat {
    let mut term = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut sum = term;
    for k in 1..40 {
        term = mat_mul(&term, a);
        for row in &mut term {
            for v in row.iter_mut() {
                *v /= k as f64;
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                sum[i][j] += term[i][j];
            }
        }
    }
    sum
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn flow_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst16, mut min_order, mut worst_trip) = (0.0f64, f64::INFINITY, 0.0f64);
    for _ in 0..20 {
        let mut a: Mat = [[0.0; 3]; 3];
        a.iter_mut().flatten().for_each(|v| *v = rng.random_range(-1.0..1.0));
        // Frobenius norm 0.5 bounds the operator norm.
        let fro = a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        a.iter_mut().flatten().for_each(|v| *v *= 0.5 / fro);
        let field = LinearField { matrix: a };
        let e = expm(&a);
        let p: Point = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let exact = [0, 1, 2].map(|i| e[i][0] * p[0] + e[i][1] * p[1] + e[i][2] * p[2]);
        let errs: Vec<f64> = [2, 4, 8, 16]
            .iter()
            .map(|&k| integrate(&field, p, &FlowConfig::forward(k)).map(|q| dist(q, exact)))
            .collect::<Result<_, _>>()?;
        worst16 = worst16.max(errs[3]);
        // The finest pair sits near round-off for the mildest matrices.
        for w in errs[..3].windows(2) {
            min_order = min_order.min((w[0] / w[1]).log2());
        }
    }
    for s in 0..10 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + s);
        let tp = Triplane::random(8, 2, 0.3, &mut r)?;
        let mut dec = VelocityDecoder::new(2, &[16, 16], Activation::Softplus, true, &mut r)?;
        dec.net.params_mut().iter_mut().for_each(|v| *v = r.random_range(-0.3..0.3));
        let field = NeuralField::new(&tp, &dec);
        for _ in 0..20 {
            let p: Point = [r.random_range(-0.8..0.8), r.random_range(-0.8..0.8), r.random_range(-0.8..0.8)];
            let q = integrate(&field, p, &FlowConfig::forward(16))?;
            let back = integrate(&field, q, &FlowConfig::inverse(16))?;
            worst_trip = worst_trip.max(dist(back, p));
        }
    }
    let pass = worst16 < 1e-6 && min_order >= 3.7 && worst_trip < 1e-3;
    Ok((pass, format!("K=16 error {worst16:.2e}; order {min_order:.2}; round trip {worst_trip:.2e}")))
}

struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict_noise(&self, x: &[f64], _t: usize) -> diffeoshape::Result<Vec<f64>> {
        Ok(vec![0.0; x.len()])
    }
}

/// Knows `x0`, so it returns the exact noise of any `x_t`.
struct Oracle<'a> {
    x0: &'a [f64],
    alpha_bar: &'a [f64],
}

impl NoisePredictor for Oracle<'_> {
    fn predict_noise(&self, x: &[f64], t: usize) -> diffeoshape::Result<Vec<f64>> {
        let ab = self.alpha_bar[t - 1];
        Ok(x.iter().zip(self.x0).map(|(xt, x0)| (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt()).collect())
    }
}

fn normals(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn ddpm_check() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for (steps, b0, b1) in [(100, 1e-3, 0.2), (1000, 1e-4, 0.02)] {
        let s = make_schedule(steps, b0, b1, ScheduleKind::Linear)?;
        let mut prod = 1.0;
        for t in 0..steps {
            prod *= 1.0 - s.beta[t];
            pass &= s.alpha_bar[t] == prod && s.alpha[t] == 1.0 - s.beta[t];
        }
    }
    notes.push(format!("product identity {}", if pass { "exact" } else { "broken" }));

    let sched = make_schedule(100, 1e-3, 0.2, ScheduleKind::Linear)?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x0 = [0.7, -1.3];
    let (t, n) = (40, 40_000);
    let ab = sched.alpha_bar[t - 1];
    let (mut sum, mut sq) = ([0.0; 2], [0.0; 2]);
    for _ in 0..n {
        let xt = q_sample(&x0, t, &normals(2, &mut rng), &sched)?;
        for d in 0..2 {
            sum[d] += xt[d];
            sq[d] += xt[d] * xt[d];
        }
    }
    // Mean within 5 standard errors; variance within 3% (its standard error is
    // about 0.7% at this n).
    let mut moments_ok = true;
    for d in 0..2 {
        let mean = sum[d] / n as f64;
        let var = sq[d] / n as f64 - mean * mean;
        moments_ok &= (mean - ab.sqrt() * x0[d]).abs() < 5.0 * ((1.0 - ab) / n as f64).sqrt();
        moments_ok &= ((var - (1.0 - ab)) / (1.0 - ab)).abs() < 0.03;
    }
    pass &= moments_ok;
    notes.push(format!("q_sample moments {}", if moments_ok { "ok" } else { "off" }));

    let x0 = normals(64, &mut rng);
    let oracle = Oracle { x0: &x0, alpha_bar: &sched.alpha_bar };
    let x1 = q_sample(&x0, 1, &normals(64, &mut rng), &sched)?;
    let rec = p_sample_step(&oracle, &x1, 1, &sched, &normals(64, &mut rng))?;
    let err = rec.iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    pass &= err < 1e-10;
    notes.push(format!("t=1 oracle error {err:.1e}"));

    let batch: Vec<Vec<f64>> = (0..16).map(|_| normals(1024, &mut rng)).collect();
    let zero = diffusion_loss(&ZeroPredictor, &batch, &sched, 9)?;
    pass &= (zero - 1.0).abs() < 0.05;
    notes.push(format!("zero-denoiser loss {zero:.4}"));
    Ok((pass, notes.join("; ")))
}

fn flat_square() -> TriMesh {
    TriMesh::new(vec![[-0.5, -0.5, 0.0], [0.5, -0.5, 0.0], [0.5, 0.5, 0.0], [-0.5, 0.5, 0.0]], vec![[0, 1, 2], [0, 2, 3]]).expect("valid mesh")
}

fn shifted(m: &TriMesh, d: Point) -> TriMesh {
    TriMesh::new(m.vertices.iter().map(|v| [v[0] + d[0], v[1] + d[1], v[2] + d[2]]).collect(), m.triangles.clone()).expect("valid mesh")
}

fn metrics_check() -> Outcome {
    let mut notes = Vec::new();
    let sphere = TriMesh::icosphere(5);
    let cd = chamfer(&sphere.scaled(0.5), &sphere.scaled(0.6), METRIC_SAMPLES, 8)?;
    let mut pass = ((cd - 0.01) / 0.01).abs() < 0.05;
    notes.push(format!("concentric chamfer {cd:.5}"));

    let sq = flat_square();
    let flat = normal_consistency(&sq, &sq.flipped(), 2000, 8)?;
    let round = normal_consistency(&sphere, &sphere.flipped(), METRIC_SAMPLES, 8)?;
    pass &= (flat + 1.0).abs() < 1e-12 && round < -0.99;
    notes.push(format!("flipped NC {flat:.12} (plane), {round:.4} (sphere)"));

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut agree = 0;
    let mut total_hits = 0;
    for f in 0..20 {
        let mesh = if f % 2 == 0 {
            let v: Vec<Point> = (0..60).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
            let tris: Vec<[usize; 3]> = (0..20).map(|i| [3 * i, 3 * i + 1, 3 * i + 2]).collect();
            TriMesh::new(v, tris)?
        } else {
            let s = TriMesh::icosphere(2).scaled(rng.random_range(0.3..0.6));
            let d = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 0.0];
            s.merged(&shifted(&s, d))
        };
        let fast = self_intersections(&mesh);
        total_hits += fast;
        agree += usize::from(fast == self_intersections_brute_force(&mesh));
    }
    pass &= agree == 20 && total_hits > 0;
    notes.push(format!("self-intersections agree on {agree}/20 fixtures ({total_hits} pairs)"));

    let (mg, mr) = (DVector::from_vec(vec![0.1, -0.4, 2.0]), DVector::from_vec(vec![0.5, 0.3, 1.0]));
    let (vg, vr) = ([0.5, 2.0, 1.5], [1.2, 0.3, 1.5]);
    let g = GaussianStats { mean: mg.clone(), cov: DMatrix::from_diagonal(&DVector::from_vec(vg.to_vec())) };
    let r = GaussianStats { mean: mr.clone(), cov: DMatrix::from_diagonal(&DVector::from_vec(vr.to_vec())) };
    let closed = (&mg - &mr).norm_squared() + (0..3).map(|i| vg[i] + vr[i] - 2.0 * (vg[i] * vr[i]).sqrt()).sum::<f64>();
    let fd = frechet_distance(&g, &r)?;
    pass &= (fd - closed).abs() < 1e-8;
    notes.push(format!("diagonal Fréchet error {:.1e}", (fd - closed).abs()));

    // Worked by hand: with k = 1 the real balls cover [-1, 11] and the
    // generated ones two tight pairs; with k = 2 the real balls cover [-3, 13]
    // and the widest generated ball [-7.5, 12.5] holds every real point.
    let pts = |v: &[f64]| v.iter().map(|x| vec![*x]).collect::<Vec<_>>();
    let real = pts(&[0.0, 1.0, 3.0, 7.0]);
    let pr1 = precision_recall(&pts(&[0.5, 0.6, 12.0, 12.1]), &real, 1)?;
    let pr2 = precision_recall(&pts(&[2.5, 12.5, 13.5, -3.5, 20.0]), &real, 2)?;
    pass &= pr1 == (0.5, 0.0) && pr2 == (0.4, 1.0);
    notes.push(format!("precision/recall fixtures {pr1:?} {pr2:?}"));
    Ok((pass, notes.join("; ")))
}

struct HeldOut {
    shape: AnalyticShape,
    samples: ShapeSampleSet,
    gt: Option<TriMesh>,
}

struct Recon {
    mesh: TriMesh,
    topology: TopologyReport,
}

struct DeskRun {
    model: ModelConfig,
    cfg: TrainConfig,
    bundle: ModelBundle,
    train_shapes: Vec<AnalyticShape>,
    held_out: Vec<HeldOut>,
    template: TriMesh,
}

impl DeskRun {
    fn train() -> Result<Self, Box<dyn std::error::Error>> {
        let (model, cfg) = (ModelConfig::desk(), TrainConfig::desk());
        let family = EllipsoidFamily::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shapes: Vec<AnalyticShape> = (0..TRAIN_SHAPES + HELD_OUT).map(|_| family.sample(&mut rng)).collect::<Result<_, _>>()?;
        let spec = SampleSpec { total: 4000, ..SampleSpec::default() };
        let sets: Vec<ShapeSampleSet> = shapes.iter().enumerate().map(|(i, s)| sample_sdf(s, &spec, 100 + i as u64)).collect::<Result<_, _>>()?;
        let mut trainer = Trainer::new(TRAIN_SHAPES, &model, &cfg, 7)?;
        let t = Instant::now();
        for _ in 0..cfg.epochs {
            trainer.step_epoch(&sets[..TRAIN_SHAPES])?;
        }
        let last = trainer.history.last().ok_or("no epochs")?;
        println!("desk training: {} epochs in {:.1}s, final rec {:.5}", cfg.epochs, t.elapsed().as_secs_f64(), last.loss_rec);
        let template = template_mesh(&trainer.bundle.template, TEMPLATE_RESOLUTION, TEMPLATE_VERTICES)?;
        let held_out = shapes[TRAIN_SHAPES..].iter().zip(&sets[TRAIN_SHAPES..]).map(|(s, x)| HeldOut { shape: s.clone(), samples: x.clone(), gt: None }).collect();
        Ok(Self { model, cfg, bundle: trainer.bundle, train_shapes: shapes[..TRAIN_SHAPES].to_vec(), held_out, template })
    }

    fn register(&self, triplane: &Triplane) -> Result<(TriMesh, TopologyReport), Box<dyn std::error::Error>> {
        let field = NeuralField::new(triplane, &self.bundle.decoder);
        let mesh = register_with_field(&self.template, &field, &self.model.eval_flow().reversed())?;
        let topology = topology_report(&self.template, &mesh, &field, JACOBIAN_N, &self.model.eval_flow())?;
        Ok((mesh, topology))
    }

    fn reconstruct_held_out(&self, grid_supervision: bool) -> Result<Vec<Recon>, Box<dyn std::error::Error>> {
        let cfg = TrainConfig { grid_supervision, ..self.cfg.clone() };
        let mut out = Vec::new();
        for (i, h) in self.held_out.iter().enumerate() {
            let grid = eval_sdf_grid(|p| Ok(h.shape.sdf(p)), cfg.recon_grid_n)?;
            let r = reconstruct(&self.bundle, &h.samples, Some(&grid), &cfg, 300 + i as u64)?;
            let (mesh, topology) = self.register(&r.triplane)?;
            out.push(Recon { mesh, topology });
        }
        Ok(out)
    }

    fn topology(&self, recon: &[Recon], secs: f64) -> Outcome {
        let min_j = recon.iter().map(|r| r.topology.positive_jacobian_fraction).fold(f64::INFINITY, f64::min);
        let max_si = recon.iter().map(|r| r.topology.self_intersections).max().unwrap_or(0);
        let connectivity = recon.iter().all(|r| r.topology.connectivity_unchanged);
        let verts = self.template.vertices.len();
        let pass = min_j >= 0.999 && connectivity && max_si <= 20 && secs < 900.0;
        Ok((pass, format!("template {verts} vertices; min positive Jacobian {min_j:.5}; connectivity unchanged {connectivity}; max self-intersections {max_si}; train+reconstruct {secs:.0}s")))
    }

    fn chamfers(&mut self, recon: &[Recon]) -> Result<Vec<(f64, f64)>, Box<dyn std::error::Error>> {
        let mut out = Vec::new();
        for (h, r) in self.held_out.iter_mut().zip(recon) {
            if h.gt.is_none() {
                h.gt = Some(ground_truth_mesh(&h.shape, GT_RESOLUTION, GT_SMOOTHING)?);
            }
            let gt = h.gt.as_ref().expect("just set");
            out.push((chamfer(&r.mesh, gt, METRIC_SAMPLES, 4)?, normal_consistency(&r.mesh, gt, METRIC_SAMPLES, 4)?));
        }
        Ok(out)
    }

    fn quality(&mut self, recon: &[Recon]) -> Result<((bool, String), f64), Box<dyn std::error::Error>> {
        let m = self.chamfers(recon)?;
        let mean_cd = m.iter().map(|x| x.0).sum::<f64>() / m.len() as f64;
        let mean_nc = m.iter().map(|x| x.1).sum::<f64>() / m.len() as f64;
        let per: Vec<String> = m.iter().map(|(c, n)| format!("{c:.2e}/{n:.3}")).collect();
        let pass = mean_cd < 5e-4 && mean_nc > 0.95;
        Ok(((pass, format!("mean chamfer {mean_cd:.3e}, mean NC {mean_nc:.4}; per shape {per:?}")), mean_cd))
    }

    fn ablation(&mut self, baseline: f64) -> Outcome {
        let recon = self.reconstruct_held_out(false)?;
        let m = self.chamfers(&recon)?;
        let mean = m.iter().map(|x| x.0).sum::<f64>() / m.len() as f64;
        let ratio = mean / baseline;
        Ok((ratio >= 1.5, format!("chamfer without grid supervision {mean:.3e} vs {baseline:.3e}: ratio {ratio:.2}")))
    }

    fn generation(&mut self) -> Outcome {
        let dcfg = DiffusionConfig::desk();
        let stats = TriplaneStats::fit(&self.bundle.triplanes, dcfg.clip)?;
        let images: Vec<Vec<f64>> = self.bundle.triplanes.iter().map(|t| stats.normalize(t)).collect::<Result<_, _>>()?;
        let t = Instant::now();
        let (den, history) = train_denoiser(&images, self.model.resolution, 3 * self.model.channels, &dcfg, 5)?;
        println!(
            "denoiser: {} images, {} epochs in {:.1}s, loss {:.4} -> {:.4}",
            images.len(),
            dcfg.epochs,
            t.elapsed().as_secs_f64(),
            history.first().copied().unwrap_or(f64::NAN),
            history.last().copied().unwrap_or(f64::NAN)
        );
        let sched = dcfg.schedule()?;
        let mut generated = Vec::new();
        let (mut connectivity, mut min_j, mut max_si) = (true, f64::INFINITY, 0);
        for i in 0..GENERATED {
            let tp = generate(&den, &sched, &stats, 1000 + i as u64)?;
            let (mesh, topo) = self.register(&tp)?;
            connectivity &= topo.connectivity_unchanged;
            min_j = min_j.min(topo.positive_jacobian_fraction);
            max_si = max_si.max(topo.self_intersections);
            generated.push(shape_descriptor(&mesh, 5000, 2000 + i as u64)?);
        }
        let real: Vec<Descriptor> = self
            .train_shapes
            .iter()
            .enumerate()
            .map(|(i, s)| ground_truth_mesh(s, GT_RESOLUTION, GT_SMOOTHING).and_then(|m| shape_descriptor(&m, 5000, 3000 + i as u64)))
            .collect::<Result<_, _>>()?;
        let values = |d: &[Descriptor]| d.iter().map(|x| x.values.clone()).collect::<Vec<_>>();
        let real_stats = fit_stats(&values(&real))?;
        let fid_gen = frechet_distance(&fit_stats(&values(&generated))?, &real_stats)?;
        let degenerate = degenerate_set(&real, GENERATED)?;
        let fid_deg = frechet_distance(&fit_stats(&values(&degenerate))?, &real_stats)?;
        let pass = connectivity && min_j >= 0.999 && fid_gen < fid_deg;
        Ok((
            pass,
            format!(
                "{GENERATED} shapes; connectivity unchanged {connectivity}; min positive Jacobian {min_j:.5}; max self-intersections {max_si}; Fréchet {fid_gen:.4} vs degenerate {fid_deg:.4}"
            ),
        ))
    }
}
