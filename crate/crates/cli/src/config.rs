//! Run configuration: a built-in profile, overlaid by an optional TOML file,
//! overlaid by `--set key.path=value` flags. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use diffeoshape::diffusion::DiffusionConfig;
use diffeoshape::geometry::{EllipsoidFamily, SampleSpec, ShapeFamily};
use diffeoshape::training::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// L = 16, C = 2, 32³ Jacobian lattice, 100 diffusion steps; minutes on one core.
    Desk,
    /// L = 96, C = 4 and the long schedules; sized for a workstation.
    Full,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub family: ShapeFamily,
    pub train_count: usize,
    pub held_out: usize,
    pub seed: u64,
    pub samples: SampleSpec,
    /// Lattice size of the marching-cubes ground-truth meshes.
    pub gt_resolution: usize,
    pub smooth_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Surface samples per mesh for Chamfer distance and normal consistency.
    pub n_samples: usize,
    /// Neighbourhood size for precision/recall.
    pub k: usize,
    pub descriptor_samples: usize,
    pub template_resolution: usize,
    pub template_vertices: usize,
    pub jacobian_n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workdir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub diffusion: DiffusionConfig,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let data = DataConfig {
            family: ShapeFamily::Ellipsoid(EllipsoidFamily::default()),
            train_count: 20,
            held_out: 5,
            seed: 1,
            samples: SampleSpec { total: 4000, ..SampleSpec::default() },
            gt_resolution: 96,
            smooth_iters: 10,
        };
        let metrics = MetricsConfig {
            n_samples: 30_000,
            k: 3,
            descriptor_samples: 5000,
            template_resolution: 64,
            template_vertices: 5000,
            jacobian_n: 32,
        };
        match profile {
            Profile::Desk => Self {
                seed: 7,
                workdir: PathBuf::from("work"),
                data,
                model: ModelConfig::desk(),
                train: TrainConfig::desk(),
                diffusion: DiffusionConfig::desk(),
                metrics,
            },
            Profile::Full => Self {
                seed: 7,
                workdir: PathBuf::from("work"),
                data: DataConfig { samples: SampleSpec::default(), gt_resolution: 128, ..data },
                model: ModelConfig::full(),
                train: TrainConfig::full(),
                diffusion: DiffusionConfig::full(),
                metrics: MetricsConfig { template_resolution: 128, jacobian_n: 64, ..metrics },
            },
        }
    }

    /// Profile, then `file`, then each `key.path=value` override.
    pub fn load(profile: Profile, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = toml::Value::try_from(Self::profile(profile)).context("serializing profile")?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let file_tree: toml::Value = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            merge(&mut tree, file_tree);
        }
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: Self = tree.try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.diffusion.validate()?;
        self.data.samples.validate()?;
        if self.data.train_count < 2 {
            bail!("data.train_count must be at least 2");
        }
        if self.data.gt_resolution < 8 || self.metrics.template_resolution < 8 {
            bail!("mesh resolutions must be at least 8");
        }
        if self.metrics.n_samples == 0 || self.metrics.descriptor_samples < 2 || self.metrics.k == 0 {
            bail!("metrics sample counts and k must be positive");
        }
        if self.metrics.jacobian_n < 3 || self.metrics.template_vertices < 4 {
            bail!("metrics.jacobian_n must be >= 3 and template_vertices >= 4");
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of everything except the workdir.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.workdir = PathBuf::new();
        hex_sha256(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Tables merge key by key; everything else is replaced.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `a.b.c=value`, where `value` is parsed as a TOML value and falls back to a
/// bare string.
fn apply_override(tree: &mut toml::Value, o: &str) -> Result<()> {
    let (path, raw) = o.split_once('=').with_context(|| format!("override `{o}` is not key=value"))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut node = tree;
    for (i, key) in keys.iter().enumerate() {
        let table = node.as_table_mut().with_context(|| format!("`{}` is not a table", keys[..i].join(".")))?;
        if i + 1 == keys.len() {
            table.insert(key.to_string(), value);
            return Ok(());
        }
        node = table.entry(key.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    bail!("empty override key in `{o}`")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_round_trip_through_toml() {
        for p in [Profile::Desk, Profile::Full] {
            let cfg = RunConfig::profile(p);
            cfg.validate().unwrap();
            let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
        let full = RunConfig::profile(Profile::Full);
        assert_eq!((full.model.resolution, full.model.channels), (96, 4));
        let desk = RunConfig::profile(Profile::Desk);
        assert_eq!((desk.model.resolution, desk.model.channels, desk.metrics.jacobian_n, desk.diffusion.steps), (16, 2, 32, 100));
    }

    #[test]
    fn overrides_and_rejections() {
        let cfg = RunConfig::load(Profile::Desk, None, &["train.epochs=3".into(), "model.channels=3".into()]).unwrap();
        assert_eq!((cfg.train.epochs, cfg.model.channels), (3, 3));
        assert!(RunConfig::load(Profile::Desk, None, &["train.lambda_tv=-1".into()]).is_err());
        assert!(RunConfig::load(Profile::Desk, None, &["train.no_such_key=1".into()]).is_err());
        assert!(RunConfig::load(Profile::Desk, None, &["nonsense".into()]).is_err());
        let a = RunConfig::profile(Profile::Desk);
        let b = RunConfig { workdir: "elsewhere".into(), ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), cfg.hash());
    }

    #[test]
    fn file_layer_sits_between_profile_and_flags() {
        let path = std::env::temp_dir().join(format!("cfg-{}.toml", std::process::id()));
        std::fs::write(&path, "seed = 11\n[train]\nepochs = 5\nrecon_iters = 9\n").unwrap();
        let cfg = RunConfig::load(Profile::Desk, Some(&path), &["train.epochs=6".into()]).unwrap();
        assert_eq!((cfg.seed, cfg.train.epochs, cfg.train.recon_iters), (11, 6, 9));
        std::fs::write(&path, "[train]\nepoch = 5\n").unwrap();
        assert!(RunConfig::load(Profile::Desk, Some(&path), &[]).is_err());
        std::fs::remove_file(path).ok();
    }
}
