use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Point;
use crate::geometry::analytic::AnalyticShape;
use crate::geometry::grid::eval_sdf_grid;
use crate::geometry::marching_cubes::marching_cubes;
use crate::training::ShapeSampleSet;

/// Lattice resolution of the proxy mesh used to draw surface points.
const SURFACE_PROXY_N: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSpec {
    pub total: usize,
    pub uniform_fraction: f64,
    pub near_surface_sigma: f64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self { total: 20_000, uniform_fraction: 0.2, near_surface_sigma: 0.05 }
    }
}

impl SampleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.total == 0 {
            return Err(Error::Config("sample count must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.uniform_fraction) {
            return Err(Error::Config(format!("uniform fraction {} outside [0, 1]", self.uniform_fraction)));
        }
        if !(self.near_surface_sigma.is_finite() && self.near_surface_sigma > 0.0) {
            return Err(Error::Config(format!("near-surface sigma must be positive, got {}", self.near_surface_sigma)));
        }
        Ok(())
    }

    pub fn uniform_count(&self) -> usize {
        (self.total as f64 * self.uniform_fraction).round() as usize
    }
}

/// Area-uniform points on the zero level set: drawn from a marching-cubes
/// proxy, then pulled onto the exact surface by Newton steps along the
/// gradient.
pub fn surface_points<R: Rng + ?Sized>(shape: &AnalyticShape, n: usize, rng: &mut R) -> Result<Vec<Point>> {
    let grid = eval_sdf_grid(|p| Ok(shape.sdf(p)), SURFACE_PROXY_N)?;
    let proxy = marching_cubes(&grid, 0.0);
    let samples = proxy.sample_surface(n, rng)?;
    Ok(samples
        .into_iter()
        .map(|(mut p, _)| {
            for _ in 0..4 {
                let s = shape.sdf(p);
                let g = shape.gradient(p);
                let g2 = g[0] * g[0] + g[1] * g[1] + g[2] * g[2];
                if g2 < 1e-12 || s.abs() < 1e-12 {
                    break;
                }
                for c in 0..3 {
                    p[c] -= s * g[c] / g2;
                }
            }
            p
        })
        .collect())
}

/// The uniform points come first, then the near-surface ones.
pub fn sample_sdf(shape: &AnalyticShape, spec: &SampleSpec, seed: u64) -> Result<ShapeSampleSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_uniform = spec.uniform_count();
    let n_near = spec.total - n_uniform;
    let mut points = Vec::with_capacity(spec.total);
    for _ in 0..n_uniform {
        points.push([rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]);
    }
    let noise = Normal::new(0.0, spec.near_surface_sigma).map_err(|e| Error::Config(e.to_string()))?;
    if n_near > 0 {
        for s in surface_points(shape, n_near, &mut rng)? {
            let p = [s[0] + noise.sample(&mut rng), s[1] + noise.sample(&mut rng), s[2] + noise.sample(&mut rng)];
            points.push(p.map(|v| v.clamp(-1.0, 1.0)));
        }
    }
    let sdf = points.iter().map(|&p| shape.sdf(p)).collect();
    let mut uniform = vec![true; n_uniform];
    uniform.resize(spec.total, false);
    ShapeSampleSet::new(points, sdf, uniform)
}
