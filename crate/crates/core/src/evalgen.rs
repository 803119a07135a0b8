//! Generation quality in a geometric descriptor space: a Fréchet distance
//! between Gaussian fits, and k-NN manifold precision/recall.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::mesh::{dot, sub, TriMesh};

pub const HISTOGRAM_BINS: usize = 16;
/// Radial histogram covers `[0, HISTOGRAM_RANGE)`; farther samples land in the last bin.
pub const HISTOGRAM_RANGE: f64 = 1.8;
pub const DESCRIPTOR_DIM: usize = 5 + HISTOGRAM_BINS;
pub const DEFAULT_K: usize = 3;

/// `[volume, area, λ1 ≥ λ2 ≥ λ3, histogram…]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub values: Vec<f64>,
    /// False when the mesh is open, in which case the volume term is the
    /// divergence-theorem value of an open surface.
    pub watertight: bool,
}

impl Descriptor {
    pub fn volume(&self) -> f64 {
        self.values[0]
    }

    pub fn area(&self) -> f64 {
        self.values[1]
    }

    pub fn pca(&self) -> &[f64] {
        &self.values[2..5]
    }

    pub fn histogram(&self) -> &[f64] {
        &self.values[5..]
    }
}

pub fn shape_descriptor(mesh: &TriMesh, n_samples: usize, seed: u64) -> Result<Descriptor> {
    if mesh.is_empty() {
        return Err(Error::Metric("descriptor of an empty mesh".into()));
    }
    if n_samples < 2 {
        return Err(Error::Metric("descriptor needs at least two surface samples".into()));
    }
    let samples = mesh.sample_surface(n_samples, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let n = samples.len() as f64;
    let mut c = [0.0; 3];
    for (p, _) in &samples {
        for k in 0..3 {
            c[k] += p[k] / n;
        }
    }
    let mut cov = [[0.0; 3]; 3];
    let mut hist = vec![0.0; HISTOGRAM_BINS];
    for (p, _) in &samples {
        let d = sub(*p, c);
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j] / n;
            }
        }
        let r = dot(d, d).sqrt();
        let bin = ((r / HISTOGRAM_RANGE * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        hist[bin] += 1.0 / n;
    }
    let eig = SymmetricEigen::new(nalgebra::Matrix3::from_fn(|i, j| cov[i][j]));
    let mut lam: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();
    lam.sort_by(|a, b| b.total_cmp(a));
    let mut values = vec![mesh.signed_volume().abs(), mesh.area()];
    values.extend(lam);
    values.extend(hist);
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "shape descriptor", index: i });
    }
    Ok(Descriptor { values, watertight: mesh.is_watertight() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Sample mean and unbiased covariance.
pub fn fit_stats(set: &[Vec<f64>]) -> Result<GaussianStats> {
    if set.len() < 2 {
        return Err(Error::Stats(format!("need at least 2 vectors, got {}", set.len())));
    }
    let d = set[0].len();
    if set.iter().any(|v| v.len() != d) {
        return Err(Error::Stats("vectors differ in length".into()));
    }
    let n = set.len() as f64;
    let mut mean = DVector::zeros(d);
    for v in set {
        mean += DVector::from_column_slice(v);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for v in set {
        let x = DVector::from_column_slice(v) - &mean;
        cov += &x * x.transpose();
    }
    cov /= n - 1.0;
    Ok(GaussianStats { mean, cov })
}

/// Square root of a symmetric PSD matrix, clamping small negative
/// eigenvalues to zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

/// `‖μg − μr‖² + Tr(Σg + Σr − 2(Σr Σg)^{1/2})`. The trace of the product root
/// is taken as `Tr((S Σg S)^{1/2})` with `S = Σr^{1/2}`, which has the same
/// eigenvalues and is symmetric.
pub fn frechet_distance(g: &GaussianStats, r: &GaussianStats) -> Result<f64> {
    let d = g.mean.len();
    if r.mean.len() != d || g.cov.shape() != (d, d) || r.cov.shape() != (d, d) {
        return Err(Error::Stats("Gaussian statistics differ in dimension".into()));
    }
    let s = sqrt_psd(&r.cov);
    let cross = sqrt_psd(&(&s * &g.cov * &s)).trace();
    let v = (&g.mean - &r.mean).norm_squared() + g.cov.trace() + r.cov.trace() - 2.0 * cross;
    if !v.is_finite() {
        return Err(Error::Stats("non-finite Fréchet distance".into()));
    }
    Ok(v.max(0.0))
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each point to its `k`-th nearest other point.
fn knn_radii(set: &[Vec<f64>], k: usize) -> Vec<f64> {
    set.iter()
        .enumerate()
        .map(|(i, a)| {
            let mut d: Vec<f64> = set.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, b)| dist2(a, b)).collect();
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

/// Fraction of `queries` inside the union of `k`-NN balls around `support`.
fn coverage(queries: &[Vec<f64>], support: &[Vec<f64>], k: usize) -> f64 {
    let radii = knn_radii(support, k);
    let hit = queries.iter().filter(|q| support.iter().zip(&radii).any(|(s, r)| dist2(q, s) <= *r)).count();
    hit as f64 / queries.len() as f64
}

/// Precision: generated points inside the real manifold estimate. Recall:
/// real points inside the generated one.
pub fn precision_recall(generated: &[Vec<f64>], real: &[Vec<f64>], k: usize) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::Stats("k must be positive".into()));
    }
    if generated.len() < k + 1 || real.len() < k + 1 {
        return Err(Error::Stats(format!("precision/recall with k = {k} needs at least {} points per set", k + 1)));
    }
    let d = real[0].len();
    if generated.iter().chain(real).any(|v| v.len() != d) {
        return Err(Error::Stats("vectors differ in length".into()));
    }
    Ok((coverage(generated, real, k), coverage(real, generated, k)))
}

/// Per-dimension standardization fitted on the real set, so that no single
/// descriptor entry dominates distances. Constant dimensions keep scale 1.
pub fn standardize(real: &[Vec<f64>], others: &[&[Vec<f64>]]) -> Result<(Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>)> {
    let stats = fit_stats(real)?;
    let scale: Vec<f64> = (0..stats.mean.len())
        .map(|i| {
            let s = stats.cov[(i, i)].sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let apply = |set: &[Vec<f64>]| -> Vec<Vec<f64>> {
        set.iter().map(|v| v.iter().enumerate().map(|(i, x)| (x - stats.mean[i]) / scale[i]).collect()).collect()
    };
    Ok((apply(real), others.iter().map(|s| apply(s)).collect()))
}

/// A collapsed generator: `count` copies of the real descriptor closest to the
/// real mean in standardized coordinates.
pub fn degenerate_set(real: &[Descriptor], count: usize) -> Result<Vec<Descriptor>> {
    let r: Vec<Vec<f64>> = real.iter().map(|d| d.values.clone()).collect();
    let (rs, _) = standardize(&r, &[])?;
    let norm2 = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>();
    let best = (0..rs.len()).min_by(|&a, &b| norm2(&rs[a]).total_cmp(&norm2(&rs[b]))).expect("nonempty after fit");
    Ok(vec![real[best].clone(); count])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frechet: f64,
    pub precision: f64,
    pub recall: f64,
    pub k: usize,
    pub n_generated: usize,
    pub n_real: usize,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "generated shapes: {}", self.n_generated)?;
        writeln!(f, "real shapes:      {}", self.n_real)?;
        writeln!(f, "frechet:          {:.6}", self.frechet)?;
        writeln!(f, "precision (k={}):  {:.4}", self.k, self.precision)?;
        write!(f, "recall (k={}):     {:.4}", self.k, self.recall)
    }
}

/// Fréchet distance on raw descriptors; precision/recall on descriptors
/// standardized by the real set.
pub fn evaluate(generated: &[Descriptor], real: &[Descriptor], k: usize) -> Result<EvalReport> {
    let g: Vec<Vec<f64>> = generated.iter().map(|d| d.values.clone()).collect();
    let r: Vec<Vec<f64>> = real.iter().map(|d| d.values.clone()).collect();
    let frechet = frechet_distance(&fit_stats(&g)?, &fit_stats(&r)?)?;
    let (rs, others) = standardize(&r, &[&g])?;
    let (precision, recall) = precision_recall(&others[0], &rs, k)?;
    Ok(EvalReport { frechet, precision, recall, k, n_generated: g.len(), n_real: r.len() })
}

pub fn write_report_csv(path: impl AsRef<Path>, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    w.serialize(report).map_err(|e| Error::Format(e.to_string()))?;
    w.flush()?;
    Ok(())
}

/// One row per shape: set label, name, watertight flag and the descriptor entries.
pub fn write_descriptor_csv(path: impl AsRef<Path>, rows: &[(&str, &str, &Descriptor)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let mut header = vec!["set".to_string(), "name".into(), "watertight".into(), "volume".into(), "area".into()];
    header.extend((1..=3).map(|i| format!("pca{i}")));
    header.extend((0..HISTOGRAM_BINS).map(|i| format!("hist{i}")));
    w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
    for (set, name, d) in rows {
        let mut rec = vec![set.to_string(), name.to_string(), d.watertight.to_string()];
        rec.extend(d.values.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;

    fn diag_stats(mean: Vec<f64>, diag: &[f64]) -> GaussianStats {
        GaussianStats { mean: DVector::from_vec(mean), cov: DMatrix::from_diagonal(&DVector::from_column_slice(diag)) }
    }

    #[test]
    fn sphere_descriptor() {
        let d = shape_descriptor(&TriMesh::icosphere(5), 20_000, 1).unwrap();
        assert_eq!(d.values.len(), DESCRIPTOR_DIM);
        assert!(d.watertight);
        assert!((d.volume() / (4.0 * PI / 3.0) - 1.0).abs() < 0.02, "{}", d.volume());
        assert!((d.area() / (4.0 * PI) - 1.0).abs() < 0.02, "{}", d.area());
        let p = d.pca();
        assert!(p[0] / p[2] < 1.05, "{p:?}");
        assert!((p[0] - 1.0 / 3.0).abs() < 0.02);
        let h = d.histogram();
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let unit_bin = (1.0 / HISTOGRAM_RANGE * HISTOGRAM_BINS as f64) as usize;
        assert!(h[unit_bin] + h[unit_bin - 1] > 0.99, "{h:?}");
        assert_eq!(d, shape_descriptor(&TriMesh::icosphere(5), 20_000, 1).unwrap());
        assert!(shape_descriptor(&TriMesh::default(), 10, 1).is_err());
    }

    #[test]
    fn stats_fixtures() {
        let same = fit_stats(&vec![vec![1.0, 2.0]; 4]).unwrap();
        assert!(same.cov.iter().all(|&v| v == 0.0));
        let a = [0.5, -1.5, 2.0];
        let s = fit_stats(&[a.iter().map(|v| -v).collect(), a.to_vec()]).unwrap();
        assert!(s.mean.iter().all(|&v| v == 0.0));
        for i in 0..3 {
            for j in 0..3 {
                assert!((s.cov[(i, j)] - 2.0 * a[i] * a[j]).abs() < 1e-15);
            }
        }
        let set = vec![vec![1.0, 0.0], vec![0.0, 3.0], vec![2.0, 2.0]];
        let rev: Vec<_> = set.iter().rev().cloned().collect();
        let (x, y) = (fit_stats(&set).unwrap(), fit_stats(&rev).unwrap());
        assert!((x.cov - y.cov).abs().max() < 1e-15);
        assert!(fit_stats(&set[..1]).is_err());
    }

    #[test]
    fn frechet_fixtures() {
        let s = diag_stats(vec![1.0, 2.0, 3.0], &[0.5, 2.0, 1.0]);
        assert!(frechet_distance(&s, &s).unwrap() < 1e-8);
        let shifted = diag_stats(vec![2.0, 0.0, 3.0], &[0.5, 2.0, 1.0]);
        assert!((frechet_distance(&s, &shifted).unwrap() - 5.0).abs() < 1e-8);
        let (a, b) = ([0.5, 2.0, 1.0, 0.0], [3.0, 0.25, 1.0, 4.0]);
        let expect: f64 = a.iter().zip(&b).map(|(x, y): (&f64, &f64)| (x.sqrt() - y.sqrt()).powi(2)).sum();
        let got = frechet_distance(&diag_stats(vec![0.0; 4], &a), &diag_stats(vec![0.0; 4], &b)).unwrap();
        assert!((got - expect).abs() < 1e-8, "{got} vs {expect}");
        assert!(frechet_distance(&s, &diag_stats(vec![0.0; 2], &[1.0, 1.0])).is_err());
    }

    #[test]
    fn precision_recall_fixtures() {
        let grid: Vec<Vec<f64>> = (0..5).flat_map(|i| (0..5).map(move |j| vec![i as f64, j as f64])).collect();
        assert_eq!(precision_recall(&grid, &grid, 3).unwrap(), (1.0, 1.0));
        let far: Vec<Vec<f64>> = grid.iter().map(|v| vec![v[0] + 100.0, v[1]]).collect();
        assert_eq!(precision_recall(&far, &grid, 3).unwrap(), (0.0, 0.0));
        // A compact corner of the grid: inside the real manifold, but it
        // cannot reach the opposite corner.
        let sub: Vec<Vec<f64>> = grid.iter().filter(|v| v[0] < 2.0 && v[1] < 2.0).cloned().collect();
        let (p, r) = precision_recall(&sub, &grid, 3).unwrap();
        assert_eq!(p, 1.0);
        assert!(r < 1.0);
        assert!(precision_recall(&grid[..3], &grid, 3).is_err());
    }

    #[test]
    fn evaluate_orders_sets() {
        let real: Vec<Descriptor> = (0..8).map(|i| shape_descriptor(&TriMesh::icosphere(3).scaled(0.5 + 0.05 * i as f64), 2000, i).unwrap()).collect();
        let rep = evaluate(&real, &real, 3).unwrap();
        assert!(rep.frechet < 1e-8);
        assert_eq!((rep.precision, rep.recall), (1.0, 1.0));
        let one = degenerate_set(&real, 8).unwrap();
        assert!(one.iter().all(|d| *d == one[0]));
        let degenerate = evaluate(&one, &real, 3).unwrap();
        assert!(degenerate.frechet > 1e-3);
        let dir = std::env::temp_dir().join(format!("evalgen-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        write_report_csv(dir.join("r.csv"), &rep).unwrap();
        write_descriptor_csv(dir.join("d.csv"), &[("real", "a", &real[0])]).unwrap();
        let text = std::fs::read_to_string(dir.join("d.csv")).unwrap();
        assert_eq!(text.lines().next().unwrap().split(',').count(), 3 + DESCRIPTOR_DIM);
        std::fs::remove_dir_all(dir).ok();
    }
}
