use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{check_finite, Error, Result};
use crate::field::Point;
use crate::flow::lattice_point;

/// Samples of a scalar field on the regular `N³` lattice over `[-1, 1]³`,
/// stored row-major `[i][j][k]` with `i` along x.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfGrid {
    n: usize,
    values: Vec<f64>,
}

const MAGIC: &[u8; 4] = b"SDFG";
const VERSION: u32 = 1;

impl SdfGrid {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!("sdf grid needs N >= 2, got {n}")));
        }
        if values.len() != n * n * n {
            return Err(Error::Shape { context: "sdf grid", expected: n * n * n, actual: values.len() });
        }
        check_finite("sdf grid", &values)?;
        Ok(Self { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn spacing(&self) -> f64 {
        2.0 / (self.n - 1) as f64
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.n + j) * self.n + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Point {
        lattice_point(self.n, self.index(i, j, k))
    }

    /// Every `step`-th lattice point along each axis, with its value.
    /// `step` must divide `N - 1` so the sub-lattice spans the whole cube.
    pub fn downsample(&self, step: usize) -> Result<(usize, Vec<Point>, Vec<f64>)> {
        if step == 0 || (self.n - 1) % step != 0 {
            return Err(Error::Config(format!("grid step {step} must divide N - 1 = {}", self.n - 1)));
        }
        let m = (self.n - 1) / step + 1;
        let mut points = Vec::with_capacity(m * m * m);
        let mut values = Vec::with_capacity(m * m * m);
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    let (a, b, c) = (i * step, j * step, k * step);
                    points.push(self.point(a, b, c));
                    values.push(self.get(a, b, c));
                }
            }
        }
        Ok((m, points, values))
    }

    /// Binary layout: `b"SDFG"`, u32 version, u32 N, then `N³` little-endian
    /// f64 values in row-major `[i][j][k]` order.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.n as u32).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not an sdf grid file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported sdf grid version {version}")));
        }
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() != n * n * n * 8 {
            return Err(Error::Format("truncated sdf grid".into()));
        }
        let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Self::new(n, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + self.values.len() * 8);
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&fs::read(path)?)
    }
}

/// Samples `field` at every lattice point.
pub fn eval_sdf_grid(mut field: impl FnMut(Point) -> Result<f64>, n: usize) -> Result<SdfGrid> {
    if n < 2 {
        return Err(Error::Config(format!("sdf grid needs N >= 2, got {n}")));
    }
    let values = (0..n * n * n).map(|idx| field(lattice_point(n, idx))).collect::<Result<Vec<_>>>()?;
    SdfGrid::new(n, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::AnalyticShape;

    #[test]
    fn constant_and_pointwise_agreement() {
        let g = eval_sdf_grid(|_| Ok(0.25), 4).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.25));
        let s = AnalyticShape::sphere(0.6);
        let g = eval_sdf_grid(|p| Ok(s.sdf(p)), 9).unwrap();
        for (i, j, k) in [(0, 0, 0), (3, 4, 5), (8, 1, 7)] {
            assert_eq!(g.get(i, j, k), s.sdf(g.point(i, j, k)));
        }
        assert!(eval_sdf_grid(|_| Ok(0.0), 1).is_err());
        assert!(eval_sdf_grid(|_| Ok(f64::NAN), 3).is_err());
    }

    #[test]
    fn lattice_value_nearest_the_surface_is_bounded_by_the_diagonal() {
        let s = AnalyticShape::sphere(0.7);
        let g = eval_sdf_grid(|p| Ok(s.sdf(p)), 64).unwrap();
        let diag = 3f64.sqrt() * g.spacing();
        let nearest = g.values().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        assert!(nearest <= diag);
    }

    #[test]
    fn downsample_and_binary_round_trip() {
        let g = eval_sdf_grid(|p| Ok(p[0] + 2.0 * p[1] - p[2]), 9).unwrap();
        let (m, pts, vals) = g.downsample(4).unwrap();
        assert_eq!(m, 3);
        assert_eq!(pts[0], [-1.0, -1.0, -1.0]);
        assert_eq!(*pts.last().unwrap(), [1.0, 1.0, 1.0]);
        assert_eq!(vals[1], g.get(0, 0, 4));
        assert!(g.downsample(3).is_err());
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        assert_eq!(SdfGrid::read_from(&buf).unwrap(), g);
        assert!(SdfGrid::read_from(&buf[..buf.len() - 1]).is_err());
    }
}
