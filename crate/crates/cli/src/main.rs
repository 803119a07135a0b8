//! `diffeoshape`: synthetic data, training, reconstruction, generation and
//! evaluation for triplane-deformed implicit templates.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use commands::{Ctx, Split};
use config::{Profile, RunConfig};

#[derive(Parser)]
#[command(name = "diffeoshape", version, about)]
struct Cli {
    /// Built-in profile the configuration starts from.
    #[arg(long, value_enum, default_value_t = Profile::Desk, global = true)]
    profile: Profile,

    /// TOML file layered over the profile; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one key after the file, e.g. `--set train.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Working directory for all artifacts; defaults to the config's `workdir`.
    #[arg(long, env = "DIFFEOSHAPE_WORKDIR", global = true)]
    workdir: Option<PathBuf>,

    /// Worker threads for per-shape work.
    #[arg(long, default_value_t = 1, global = true)]
    jobs: usize,

    /// Single-threaded, bit-reproducible execution (overrides --jobs).
    #[arg(long, default_value_t = false, global = true)]
    serial: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Sample synthetic shapes: SDF samples, supervision grids and ground-truth meshes.
    MakeData,
    /// Fit decoder, template and per-shape triplanes; resumes from an existing checkpoint.
    Train {
        /// Stop (and checkpoint) after this many epochs.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Epochs between checkpoints.
        #[arg(long, default_value_t = 10)]
        checkpoint_every: usize,
        /// Ignore any existing checkpoint.
        #[arg(long, default_value_t = false)]
        fresh: bool,
    },
    /// Fit triplanes to shapes with frozen networks and score the registered template.
    Reconstruct {
        /// Which split to reconstruct: `train` or `heldout`.
        #[arg(long, default_value = "heldout")]
        split: String,
        /// Restrict to these shape names (default: the whole split).
        #[arg(long = "shape")]
        shapes: Vec<String>,
        /// Output directory under the workdir.
        #[arg(long, default_value = "recon")]
        out: String,
    },
    /// Carry the template mesh onto the shape of one triplane file.
    Register {
        #[arg(long)]
        triplane: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the triplane denoiser on the fitted training triplanes.
    DiffuseTrain,
    /// Sample triplanes and register the template onto each.
    Generate {
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value = "generated")]
        out: String,
    },
    /// Fréchet distance and precision/recall between two mesh directories.
    Evaluate {
        /// Generated meshes, relative to the workdir.
        #[arg(long, default_value = "generated")]
        gen: String,
        /// Reference meshes, relative to the workdir.
        #[arg(long, default_value = "data/train")]
        real: String,
        #[arg(long, default_value = "eval")]
        out: String,
    },
    /// Finite-difference checks of every loss gradient.
    GradCheck,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.profile, cli.config.as_deref(), &cli.overrides)?;
    if let Command::Config = cli.command {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let threads = if cli.serial { 1 } else { cli.jobs.max(1) };
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().context("starting worker pool")?;
    let workdir = cli.workdir.clone().unwrap_or_else(|| cfg.workdir.clone());
    let ctx = Ctx::new(cfg, workdir)?;
    match cli.command {
        Command::Config => unreachable!(),
        Command::MakeData => commands::make_data(&ctx),
        Command::Train { stop_after, checkpoint_every, fresh } => commands::train(&ctx, stop_after, checkpoint_every, fresh),
        Command::Reconstruct { split, shapes, out } => commands::reconstruct_cmd(&ctx, Split::parse(&split)?, &shapes, &out),
        Command::Register { triplane, out } => commands::register_cmd(&ctx, &triplane, &out),
        Command::DiffuseTrain => commands::diffuse_train(&ctx),
        Command::Generate { count, out } => commands::generate_cmd(&ctx, count, &out),
        Command::Evaluate { gen, real, out } => commands::evaluate_cmd(&ctx, &gen, &real, &out),
        Command::GradCheck => commands::grad_check_cmd(&ctx),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
