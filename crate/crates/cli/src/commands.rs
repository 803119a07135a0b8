use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use diffeoshape::diffusion::{generate, train_denoiser, Denoiser, TriplaneStats};
use diffeoshape::evalgen::{degenerate_set, evaluate, shape_descriptor, write_descriptor_csv, write_report_csv, Descriptor};
use diffeoshape::field::Triplane;
use diffeoshape::flow::NeuralField;
use diffeoshape::geometry::{
    chamfer, eval_sdf_grid, ground_truth_mesh, normal_consistency, obj_read, obj_write, register_template, sample_sdf,
    template_mesh, topology_report, SdfGrid, TopologyReport, TriMesh,
};
use diffeoshape::training::{grad_suite, reconstruct, write_history_csv, ModelBundle, ShapeSampleSet, Trainer, GRAD_SUITE_SEED};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{hex_sha256, RunConfig};
use crate::manifest::{Entry, Manifest};

pub const GRAD_TOLERANCE: f64 = 1e-4;

pub struct Ctx {
    pub cfg: RunConfig,
    pub workdir: PathBuf,
    pub manifest: Manifest,
}

/// What a command produced. `failures` lists violated invariants.
#[derive(Default)]
pub struct Outcome {
    pub artifacts: Vec<PathBuf>,
    pub metrics: Value,
    pub failures: Vec<String>,
}

impl Ctx {
    pub fn new(cfg: RunConfig, workdir: PathBuf) -> Result<Self> {
        let manifest = Manifest::open(&workdir)?;
        Ok(Self { cfg, workdir, manifest })
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.workdir.join(rel)
    }

    /// Runs `f` unless an earlier successful run with the same key left all
    /// its artifacts in place, and records the run in the manifest.
    pub fn run(&self, command: &str, args: Value, f: impl FnOnce(&Self) -> Result<Outcome>) -> Result<()> {
        let config_hash = self.cfg.hash();
        let key = hex_sha256(format!("{command}\n{config_hash}\n{args}").as_bytes());
        let config = serde_json::to_value(&self.cfg)?;
        let mut entry = Entry {
            command: command.into(),
            config_hash,
            key: key.clone(),
            seed: self.cfg.seed,
            cache_hit: false,
            ok: true,
            unix_time: Entry::now(),
            artifacts: Vec::new(),
            metrics: Value::Null,
            config,
        };
        if let Some(prev) = self.manifest.lookup(&key, &self.workdir)? {
            println!("{command}: cache hit ({} artifacts up to date)", prev.artifacts.len());
            entry.cache_hit = true;
            entry.artifacts = prev.artifacts;
            entry.metrics = prev.metrics;
            self.manifest.append(&entry)?;
            return Ok(());
        }
        match f(self) {
            Ok(out) => {
                entry.artifacts = out.artifacts.iter().map(|p| p.strip_prefix(&self.workdir).unwrap_or(p).to_path_buf()).collect();
                entry.metrics = out.metrics;
                entry.ok = out.failures.is_empty();
                self.manifest.append(&entry)?;
                if entry.ok {
                    Ok(())
                } else {
                    bail!("{command}: invariant check failed: {}", out.failures.join("; "))
                }
            }
            Err(e) => {
                entry.ok = false;
                entry.metrics = json!({ "error": format!("{e:#}") });
                self.manifest.append(&entry)?;
                Err(e)
            }
        }
    }
}

/// Per-item seed derived from a base seed.
pub fn mix(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    HeldOut,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "data/train",
            Split::HeldOut => "data/heldout",
        }
    }

    pub fn name(self, i: usize) -> String {
        match self {
            Split::Train => format!("train_{i:04}"),
            Split::HeldOut => format!("heldout_{i:04}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "heldout" | "held-out" => Ok(Split::HeldOut),
            _ => bail!("unknown split `{s}` (expected train or heldout)"),
        }
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn make_data(ctx: &Ctx) -> Result<()> {
    ctx.run("make-data", json!({}), |ctx| {
        let d = &ctx.cfg.data;
        let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
        let mut jobs = Vec::new();
        for (split, count) in [(Split::Train, d.train_count), (Split::HeldOut, d.held_out)] {
            ensure_dir(&ctx.path(split.dir()))?;
            for i in 0..count {
                jobs.push((split, i, d.family.sample(jobs.len(), &mut rng)?));
            }
        }
        let grid_n = ctx.cfg.train.recon_grid_n;
        let results: Vec<(Vec<PathBuf>, f64)> = jobs
            .par_iter()
            .enumerate()
            .map(|(g, (split, i, shape))| -> Result<(Vec<PathBuf>, f64)> {
                let stem = ctx.path(split.dir()).join(split.name(*i));
                let samples = sample_sdf(shape, &d.samples, mix(d.seed, g))?;
                let paths = [stem.with_extension("json"), stem.with_extension("csv"), stem.with_extension("obj"), stem.with_extension("sdfgrid")];
                fs::write(&paths[0], serde_json::to_vec_pretty(shape)?)?;
                samples.save(&paths[1])?;
                obj_write(&ground_truth_mesh(shape, d.gt_resolution, d.smooth_iters)?, &paths[2])?;
                eval_sdf_grid(|p| Ok(shape.sdf(p)), grid_n)?.save(&paths[3])?;
                Ok((paths.to_vec(), samples.uniform_fraction()))
            })
            .collect::<Result<_>>()?;
        let fractions: Vec<f64> = results.iter().map(|r| r.1).collect();
        println!("make-data: {} train + {} held-out shapes in {}", d.train_count, d.held_out, ctx.path("data").display());
        Ok(Outcome {
            artifacts: results.into_iter().flat_map(|r| r.0).collect(),
            metrics: json!({
                "train": d.train_count,
                "held_out": d.held_out,
                "uniform_fraction_min": fractions.iter().cloned().fold(f64::INFINITY, f64::min),
                "uniform_fraction_max": fractions.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            }),
            failures: Vec::new(),
        })
    })
}

fn load_split(ctx: &Ctx, split: Split, count: usize) -> Result<Vec<ShapeSampleSet>> {
    (0..count)
        .map(|i| {
            let p = ctx.path(split.dir()).join(split.name(i)).with_extension("csv");
            ShapeSampleSet::load(&p).with_context(|| format!("loading {} (run make-data first)", p.display()))
        })
        .collect()
}

fn model_dir(ctx: &Ctx) -> PathBuf {
    ctx.path("model")
}

fn load_bundle(ctx: &Ctx) -> Result<(ModelBundle, TriMesh)> {
    let dir = model_dir(ctx);
    let bundle = ModelBundle::load(&dir).with_context(|| format!("loading model from {} (run train first)", dir.display()))?;
    let tmpl = obj_read(dir.join("template.obj")).context("loading template mesh (run train first)")?;
    Ok((bundle, tmpl))
}

pub fn train(ctx: &Ctx, stop_after: Option<usize>, checkpoint_every: usize, fresh: bool) -> Result<()> {
    ctx.run("train", json!({ "stop_after": stop_after }), |ctx| {
        let c = &ctx.cfg;
        let sets = load_split(ctx, Split::Train, c.data.train_count)?;
        let dir = model_dir(ctx);
        ensure_dir(&dir)?;
        let mut trainer = if !fresh && dir.join("trainer.json").exists() {
            let t = Trainer::load(&dir)?;
            if t.cfg != c.train || t.bundle.model != c.model || t.seed != c.seed || t.bundle.triplanes.len() != sets.len() {
                bail!("checkpoint in {} was made with a different configuration; pass --fresh to restart", dir.display());
            }
            println!("train: resuming at epoch {}", t.epoch);
            t
        } else {
            Trainer::new(sets.len(), &c.model, &c.train, c.seed)?
        };
        let target = stop_after.unwrap_or(c.train.epochs).min(c.train.epochs);
        while trainer.epoch < target {
            let r = trainer.step_epoch(&sets)?;
            if trainer.epoch % checkpoint_every.max(1) == 0 || trainer.epoch == target {
                trainer.save(&dir)?;
                println!("train: epoch {:>4}  total {:.5}  rec {:.5}  pw {:.5}", r.epoch, r.loss_total, r.loss_rec, r.loss_pw);
            }
        }
        trainer.save(&dir)?;
        let history = dir.join("history.csv");
        write_history_csv(&history, &trainer.history)?;
        let mut artifacts = vec![dir.join("bundle.json"), dir.join("trainer.json"), history];
        let last = trainer.history.last().cloned();
        let mut metrics = json!({ "epoch": trainer.epoch, "final": last });
        if trainer.epoch == c.train.epochs {
            let tmpl = template_mesh(&trainer.bundle.template, c.metrics.template_resolution, c.metrics.template_vertices)?;
            let path = dir.join("template.obj");
            obj_write(&tmpl, &path)?;
            artifacts.push(path);
            metrics["template"] = json!({
                "vertices": tmpl.vertices.len(),
                "watertight": tmpl.is_watertight(),
                "euler_characteristic": tmpl.euler_characteristic(),
            });
            println!("train: template mesh with {} vertices", tmpl.vertices.len());
        }
        Ok(Outcome { artifacts, metrics, failures: Vec::new() })
    })
}

#[derive(Debug, Clone, Serialize)]
struct ReconRow {
    name: String,
    chamfer: f64,
    normal_consistency: f64,
    positive_jacobian_fraction: f64,
    self_intersections: usize,
    connectivity_unchanged: bool,
    watertight: bool,
    loss_total: f64,
    loss_grid: f64,
    loss_random: f64,
    loss_jdet: f64,
    loss_def: f64,
}

pub fn reconstruct_cmd(ctx: &Ctx, split: Split, names: &[String], out: &str) -> Result<()> {
    ctx.run("reconstruct", json!({ "split": split.dir(), "names": names, "out": out }), |ctx| {
        let c = &ctx.cfg;
        let (bundle, tmpl) = load_bundle(ctx)?;
        let count = match split {
            Split::Train => c.data.train_count,
            Split::HeldOut => c.data.held_out,
        };
        let all: Vec<String> = (0..count).map(|i| split.name(i)).collect();
        let chosen: Vec<(usize, String)> = if names.is_empty() {
            all.into_iter().enumerate().collect()
        } else {
            names
                .iter()
                .map(|n| all.iter().position(|a| a == n).map(|i| (i, n.clone())).ok_or_else(|| anyhow!("unknown shape `{n}`")))
                .collect::<Result<_>>()?
        };
        let out_dir = ctx.path(out);
        ensure_dir(&out_dir)?;
        let results: Vec<(ReconRow, Vec<PathBuf>)> = chosen
            .par_iter()
            .map(|(i, name)| -> Result<(ReconRow, Vec<PathBuf>)> {
                let stem = ctx.path(split.dir()).join(name);
                let samples = ShapeSampleSet::load(stem.with_extension("csv"))?;
                let grid = if c.train.grid_supervision { Some(SdfGrid::load(stem.with_extension("sdfgrid"))?) } else { None };
                let r = reconstruct(&bundle, &samples, grid.as_ref(), &c.train, mix(c.seed, *i))?;
                let dir = out_dir.join(name);
                ensure_dir(&dir)?;
                let eval = c.model.eval_flow();
                let mesh = register_template(&tmpl, &r.triplane, &bundle.decoder, &eval.reversed())?;
                let gt = obj_read(stem.with_extension("obj"))?;
                let field = NeuralField::new(&r.triplane, &bundle.decoder);
                let topo = topology_report(&tmpl, &mesh, &field, c.metrics.jacobian_n, &eval)?;
                let paths = vec![dir.join("triplane.tpln"), dir.join("mesh.obj"), dir.join("history.csv")];
                r.triplane.save(&paths[0])?;
                obj_write(&mesh, &paths[1])?;
                write_history_csv(&paths[2], &r.history)?;
                let f = r.final_losses;
                let row = ReconRow {
                    name: name.clone(),
                    chamfer: chamfer(&mesh, &gt, c.metrics.n_samples, c.seed)?,
                    normal_consistency: normal_consistency(&mesh, &gt, c.metrics.n_samples, c.seed)?,
                    positive_jacobian_fraction: topo.positive_jacobian_fraction,
                    self_intersections: topo.self_intersections,
                    connectivity_unchanged: topo.connectivity_unchanged,
                    watertight: topo.watertight,
                    loss_total: f.total,
                    loss_grid: f.grid,
                    loss_random: f.random,
                    loss_jdet: f.jdet,
                    loss_def: f.def,
                };
                println!(
                    "reconstruct: {name}  chamfer {:.3e}  nc {:.4}  J>0 {:.5}  self-int {}",
                    row.chamfer, row.normal_consistency, row.positive_jacobian_fraction, row.self_intersections
                );
                Ok((row, paths))
            })
            .collect::<Result<_>>()?;
        let rows: Vec<ReconRow> = results.iter().map(|r| r.0.clone()).collect();
        let table = out_dir.join("metrics.csv");
        write_csv_rows(&table, &rows)?;
        let mut artifacts: Vec<PathBuf> = results.into_iter().flat_map(|r| r.1).collect();
        artifacts.push(table);
        let failures = rows.iter().filter(|r| !r.connectivity_unchanged).map(|r| format!("{} changed connectivity", r.name)).collect();
        Ok(Outcome {
            artifacts,
            metrics: json!({
                "shapes": rows.len(),
                "mean_chamfer": mean(rows.iter().map(|r| r.chamfer)),
                "mean_normal_consistency": mean(rows.iter().map(|r| r.normal_consistency)),
                "min_positive_jacobian_fraction": rows.iter().map(|r| r.positive_jacobian_fraction).fold(f64::INFINITY, f64::min),
                "max_self_intersections": rows.iter().map(|r| r.self_intersections).max(),
                "grid_supervision": c.train.grid_supervision,
            }),
            failures,
        })
    })
}

pub fn register_cmd(ctx: &Ctx, triplane: &Path, out: &Path) -> Result<()> {
    let bytes = fs::read(triplane).with_context(|| format!("reading {}", triplane.display()))?;
    let args = json!({ "triplane": hex_sha256(&bytes), "out": out });
    ctx.run("register", args, |ctx| {
        let (bundle, tmpl) = load_bundle(ctx)?;
        let tp = Triplane::read_from(bytes.as_slice())?;
        let eval = ctx.cfg.model.eval_flow();
        let mesh = register_template(&tmpl, &tp, &bundle.decoder, &eval.reversed())?;
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            ensure_dir(parent)?;
        }
        obj_write(&mesh, out)?;
        let same = mesh.triangles == tmpl.triangles;
        println!("register: wrote {} ({} vertices)", out.display(), mesh.vertices.len());
        Ok(Outcome {
            artifacts: vec![out.to_path_buf()],
            metrics: json!({ "vertices": mesh.vertices.len(), "connectivity_unchanged": same }),
            failures: if same { Vec::new() } else { vec!["connectivity changed".into()] },
        })
    })
}

fn diffusion_dir(ctx: &Ctx) -> PathBuf {
    ctx.path("diffusion")
}

pub fn diffuse_train(ctx: &Ctx) -> Result<()> {
    ctx.run("diffuse-train", json!({}), |ctx| {
        let c = &ctx.cfg;
        let (bundle, _) = load_bundle(ctx)?;
        let stats = TriplaneStats::fit(&bundle.triplanes, c.diffusion.clip)?;
        let images: Vec<Vec<f64>> = bundle.triplanes.iter().map(|t| stats.normalize(t)).collect::<Result<_, _>>()?;
        let (den, history) = train_denoiser(&images, stats.resolution, 3 * stats.channels, &c.diffusion, c.seed)?;
        let dir = diffusion_dir(ctx);
        ensure_dir(&dir)?;
        let paths = vec![dir.join("denoiser.json"), dir.join("stats.json"), dir.join("history.csv")];
        den.save(&paths[0])?;
        stats.save(&paths[1])?;
        let rows: Vec<Value> = history.iter().enumerate().map(|(e, l)| json!({ "epoch": e, "loss": l })).collect();
        let mut w = csv::Writer::from_path(&paths[2])?;
        w.write_record(["epoch", "loss"])?;
        for (e, l) in history.iter().enumerate() {
            w.write_record([e.to_string(), l.to_string()])?;
        }
        w.flush()?;
        println!(
            "diffuse-train: {} triplanes, {} epochs, loss {:.4} -> {:.4}",
            images.len(),
            history.len(),
            history.first().copied().unwrap_or(f64::NAN),
            history.last().copied().unwrap_or(f64::NAN)
        );
        Ok(Outcome {
            artifacts: paths,
            metrics: json!({ "epochs": rows.len(), "first_loss": history.first(), "final_loss": history.last(), "params": den.num_params() }),
            failures: Vec::new(),
        })
    })
}

#[derive(Debug, Clone, Serialize)]
struct TopologyRow {
    name: String,
    vertices: usize,
    connectivity_unchanged: bool,
    watertight: bool,
    positive_jacobian_fraction: f64,
    self_intersections: usize,
}

impl TopologyRow {
    fn new(name: String, r: &TopologyReport) -> Self {
        Self {
            name,
            vertices: r.vertices,
            connectivity_unchanged: r.connectivity_unchanged,
            watertight: r.watertight,
            positive_jacobian_fraction: r.positive_jacobian_fraction,
            self_intersections: r.self_intersections,
        }
    }
}

pub fn generate_cmd(ctx: &Ctx, count: usize, out: &str) -> Result<()> {
    ctx.run("generate", json!({ "count": count, "out": out }), |ctx| {
        let c = &ctx.cfg;
        let (bundle, tmpl) = load_bundle(ctx)?;
        let dir = diffusion_dir(ctx);
        let den = Denoiser::load(dir.join("denoiser.json")).context("loading denoiser (run diffuse-train first)")?;
        let stats = TriplaneStats::load(dir.join("stats.json"))?;
        let sched = c.diffusion.schedule()?;
        let out_dir = ctx.path(out);
        ensure_dir(&out_dir)?;
        let eval = c.model.eval_flow();
        let results: Vec<(TopologyRow, Vec<PathBuf>)> = (0..count)
            .into_par_iter()
            .map(|i| -> Result<(TopologyRow, Vec<PathBuf>)> {
                let tp = generate(&den, &sched, &stats, mix(c.seed ^ 0x6765_6e, i))?;
                let mesh = register_template(&tmpl, &tp, &bundle.decoder, &eval.reversed())?;
                let field = NeuralField::new(&tp, &bundle.decoder);
                let report = topology_report(&tmpl, &mesh, &field, c.metrics.jacobian_n, &eval)?;
                let name = format!("gen_{i:04}");
                let paths = vec![out_dir.join(format!("{name}.tpln")), out_dir.join(format!("{name}.obj"))];
                tp.save(&paths[0])?;
                obj_write(&mesh, &paths[1])?;
                Ok((TopologyRow::new(name, &report), paths))
            })
            .collect::<Result<_>>()?;
        let rows: Vec<TopologyRow> = results.iter().map(|r| r.0.clone()).collect();
        let table = out_dir.join("topology.csv");
        write_csv_rows(&table, &rows)?;
        let mut artifacts: Vec<PathBuf> = results.into_iter().flat_map(|r| r.1).collect();
        artifacts.push(table);
        let min_j = rows.iter().map(|r| r.positive_jacobian_fraction).fold(f64::INFINITY, f64::min);
        println!("generate: {count} shapes in {}  (min J>0 fraction {min_j:.5})", out_dir.display());
        let failures = rows
            .iter()
            .filter(|r| !r.connectivity_unchanged || r.watertight != tmpl.is_watertight())
            .map(|r| format!("{} lost the template topology", r.name))
            .collect();
        Ok(Outcome {
            artifacts,
            metrics: json!({
                "count": count,
                "min_positive_jacobian_fraction": min_j,
                "max_self_intersections": rows.iter().map(|r| r.self_intersections).max(),
            }),
            failures,
        })
    })
}

fn obj_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "obj"))
        .collect();
    files.sort();
    if files.len() < 2 {
        bail!("{} holds {} OBJ meshes; need at least 2", dir.display(), files.len());
    }
    Ok(files)
}

fn descriptors(files: &[PathBuf], n: usize, seed: u64) -> Result<Vec<Descriptor>> {
    files.par_iter().enumerate().map(|(i, f)| Ok(shape_descriptor(&obj_read(f)?, n, mix(seed, i))?)).collect()
}

pub fn evaluate_cmd(ctx: &Ctx, gen: &str, real: &str, out: &str) -> Result<()> {
    ctx.run("evaluate", json!({ "gen": gen, "real": real, "out": out }), |ctx| {
        let c = &ctx.cfg;
        let (gen_files, real_files) = (obj_files(&ctx.path(gen))?, obj_files(&ctx.path(real))?);
        let g = descriptors(&gen_files, c.metrics.descriptor_samples, c.seed)?;
        let r = descriptors(&real_files, c.metrics.descriptor_samples, c.seed)?;
        let report = evaluate(&g, &r, c.metrics.k)?;
        let baseline = evaluate(&degenerate_set(&r, g.len())?, &r, c.metrics.k)?;
        let out_dir = ctx.path(out);
        ensure_dir(&out_dir)?;
        let paths = vec![out_dir.join("report.csv"), out_dir.join("descriptors.csv"), out_dir.join("summary.txt")];
        write_report_csv(&paths[0], &report)?;
        let label = |f: &PathBuf| f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let names: Vec<(String, String)> = gen_files.iter().map(|f| ("generated".to_string(), label(f))).chain(real_files.iter().map(|f| ("real".to_string(), label(f)))).collect();
        let rows: Vec<(&str, &str, &Descriptor)> = names.iter().zip(g.iter().chain(&r)).map(|((s, n), d)| (s.as_str(), n.as_str(), d)).collect();
        write_descriptor_csv(&paths[1], &rows)?;
        let summary = format!("{report}\nfrechet of a single-shape set: {:.6}\n", baseline.frechet);
        fs::write(&paths[2], &summary)?;
        print!("{summary}");
        Ok(Outcome {
            artifacts: paths,
            metrics: json!({ "report": report, "degenerate_frechet": baseline.frechet }),
            failures: Vec::new(),
        })
    })
}

pub fn grad_check_cmd(ctx: &Ctx) -> Result<()> {
    ctx.run("grad-check", json!({}), |ctx| {
        let suite = grad_suite(GRAD_SUITE_SEED)?;
        let path = ctx.path("gradcheck.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["loss", "max_relative_error", "worst_parameter", "parameters", "pass"])?;
        let mut failures = Vec::new();
        for e in &suite {
            let pass = e.report.passes(GRAD_TOLERANCE);
            println!("{:<32} {:>10.3e}  {}", e.name, e.report.max_relative_error, if pass { "ok" } else { "FAIL" });
            w.write_record([
                e.name.to_string(),
                e.report.max_relative_error.to_string(),
                e.report.worst_parameter_index.to_string(),
                e.report.analytic.len().to_string(),
                pass.to_string(),
            ])?;
            if !pass {
                failures.push(format!("{} gradient off by {:.3e}", e.name, e.report.max_relative_error));
            }
        }
        w.flush()?;
        let worst = suite.iter().map(|e| e.report.max_relative_error).fold(0.0, f64::max);
        Ok(Outcome { artifacts: vec![path], metrics: json!({ "losses": suite.len(), "worst_relative_error": worst }), failures })
    })
}
