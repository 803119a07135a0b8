//! Closed-form signed distance functions for the synthetic shape families.
//!
//! | kind           | value                                            |
//! |----------------|--------------------------------------------------|
//! | sphere, box    | exact Euclidean SDF                              |
//! | ellipsoid      | exact, nearest point found by bisection          |
//! | superquadric   | radial distance `|q| (1 - G(q)^(-e1/2))`         |
//! | smooth union   | polynomial smooth minimum of two member SDFs     |
//!
//! The superquadric and smooth-union values have the correct sign everywhere
//! and are metric to first order at the surface, but are not exact distances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Point;
use crate::geometry::grid::eval_sdf_grid;
use crate::geometry::marching_cubes::marching_cubes;
use crate::geometry::mesh::{laplacian_smooth, TriMesh};

/// Shapes must stay inside `[-BOUND, BOUND]³` so flows have room to move.
pub const BOUND: f64 = 0.9;

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeKind {
    Sphere { radius: f64 },
    Ellipsoid { radii: [f64; 3] },
    Box { half_extents: [f64; 3] },
    /// `e1` shapes the z profile, `e2` the xy cross-section; 1 is ellipsoidal.
    Superquadric { radii: [f64; 3], e1: f64, e2: f64 },
    SmoothUnion { first: Box<AnalyticShape>, second: Box<AnalyticShape>, blend: f64 },
}

/// A shape in its local frame placed by `x_world = rotation · x_local + translation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticShape {
    pub kind: ShapeKind,
    pub rotation: Mat3,
    pub translation: Point,
}

impl AnalyticShape {
    pub fn new(kind: ShapeKind) -> Self {
        Self { kind, rotation: IDENTITY, translation: [0.0; 3] }
    }

    pub fn sphere(radius: f64) -> Self {
        Self::new(ShapeKind::Sphere { radius })
    }

    pub fn ellipsoid(radii: [f64; 3]) -> Self {
        Self::new(ShapeKind::Ellipsoid { radii })
    }

    pub fn cuboid(half_extents: [f64; 3]) -> Self {
        Self::new(ShapeKind::Box { half_extents })
    }

    pub fn superquadric(radii: [f64; 3], e1: f64, e2: f64) -> Self {
        Self::new(ShapeKind::Superquadric { radii, e1, e2 })
    }

    pub fn smooth_union(first: AnalyticShape, second: AnalyticShape, blend: f64) -> Self {
        Self::new(ShapeKind::SmoothUnion { first: Box::new(first), second: Box::new(second), blend })
    }

    pub fn with_pose(mut self, rotation: Mat3, translation: Point) -> Self {
        self.rotation = rotation;
        self.translation = translation;
        self
    }

    fn to_local(&self, p: Point) -> Point {
        let d = [p[0] - self.translation[0], p[1] - self.translation[1], p[2] - self.translation[2]];
        let r = &self.rotation;
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    pub fn sdf(&self, p: Point) -> f64 {
        let q = self.to_local(p);
        match &self.kind {
            ShapeKind::Sphere { radius } => norm(q) - radius,
            ShapeKind::Ellipsoid { radii } => ellipsoid_sdf(*radii, q),
            ShapeKind::Box { half_extents } => box_sdf(*half_extents, q),
            ShapeKind::Superquadric { radii, e1, e2 } => superquadric_sdf(*radii, *e1, *e2, q),
            ShapeKind::SmoothUnion { first, second, blend } => smooth_min(first.sdf(q), second.sdf(q), *blend),
        }
    }

    /// Central-difference gradient of [`Self::sdf`].
    pub fn gradient(&self, p: Point) -> Point {
        let h = 1e-6;
        let mut g = [0.0; 3];
        for (a, ga) in g.iter_mut().enumerate() {
            let (mut lo, mut hi) = (p, p);
            lo[a] -= h;
            hi[a] += h;
            *ga = (self.sdf(hi) - self.sdf(lo)) / (2.0 * h);
        }
        g
    }

    /// World-space half extents of an axis-aligned box around the shape,
    /// centred at the origin.
    pub fn extent(&self) -> Point {
        let local: Point = match &self.kind {
            ShapeKind::Sphere { radius } => [*radius; 3],
            ShapeKind::Ellipsoid { radii } => {
                // Exact for ellipsoids: sqrt(Σ_j R_ij² r_j²).
                let mut e = [0.0; 3];
                for (i, ei) in e.iter_mut().enumerate() {
                    *ei = (0..3).map(|j| (self.rotation[i][j] * radii[j]).powi(2)).sum::<f64>().sqrt();
                }
                return add_abs(e, self.translation);
            }
            ShapeKind::Box { half_extents } => *half_extents,
            ShapeKind::Superquadric { radii, .. } => *radii,
            ShapeKind::SmoothUnion { first, second, blend } => {
                let (a, b) = (first.extent(), second.extent());
                [a[0].max(b[0]) + blend, a[1].max(b[1]) + blend, a[2].max(b[2]) + blend]
            }
        };
        let mut e = [0.0; 3];
        for (i, ei) in e.iter_mut().enumerate() {
            *ei = (0..3).map(|j| self.rotation[i][j].abs() * local[j]).sum();
        }
        add_abs(e, self.translation)
    }

    pub fn validate(&self) -> Result<()> {
        let check_pos = |name: &str, v: &[f64]| {
            if v.iter().all(|x| x.is_finite() && *x > 0.0) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive and finite, got {v:?}")))
            }
        };
        match &self.kind {
            ShapeKind::Sphere { radius } => check_pos("sphere radius", &[*radius])?,
            ShapeKind::Ellipsoid { radii } => check_pos("ellipsoid radii", radii)?,
            ShapeKind::Box { half_extents } => check_pos("box half extents", half_extents)?,
            ShapeKind::Superquadric { radii, e1, e2 } => {
                check_pos("superquadric radii", radii)?;
                check_pos("superquadric exponents", &[*e1, *e2])?;
            }
            ShapeKind::SmoothUnion { first, second, blend } => {
                check_pos("smooth union blend", &[*blend])?;
                first.validate()?;
                second.validate()?;
            }
        }
        let orthonormal = (0..3).all(|i| {
            (0..3).all(|j| {
                let d: f64 = (0..3).map(|k| self.rotation[k][i] * self.rotation[k][j]).sum();
                (d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-9
            })
        });
        if !orthonormal || det(&self.rotation) < 0.0 {
            return Err(Error::Config("shape rotation is not a proper rotation".into()));
        }
        let e = self.extent();
        if e.iter().any(|v| *v > BOUND) {
            return Err(Error::Config(format!("shape extent {e:?} leaves [-{BOUND}, {BOUND}]³")));
        }
        Ok(())
    }
}

fn add_abs(e: Point, t: Point) -> Point {
    [e[0] + t[0].abs(), e[1] + t[1].abs(), e[2] + t[2].abs()]
}

fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn analytic_sdf(shape: &AnalyticShape, p: Point) -> f64 {
    shape.sdf(p)
}

/// Rotation `Rz(yaw) · Ry(pitch) · Rx(roll)`.
pub fn rotation_from_euler(roll: f64, pitch: f64, yaw: f64) -> Mat3 {
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    [
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ]
}

fn norm(q: Point) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt()
}

fn box_sdf(h: Point, q: Point) -> f64 {
    let d = [q[0].abs() - h[0], q[1].abs() - h[1], q[2].abs() - h[2]];
    let outside = norm([d[0].max(0.0), d[1].max(0.0), d[2].max(0.0)]);
    outside + d[0].max(d[1]).max(d[2]).min(0.0)
}

fn superquadric_sdf(r: Point, e1: f64, e2: f64, q: Point) -> f64 {
    let len = norm(q);
    if len < 1e-12 {
        return -r[0].min(r[1]).min(r[2]);
    }
    let xy = (q[0] / r[0]).abs().powf(2.0 / e2) + (q[1] / r[1]).abs().powf(2.0 / e2);
    let g = xy.powf(e2 / e1) + (q[2] / r[2]).abs().powf(2.0 / e1);
    len * (1.0 - g.powf(-e1 / 2.0))
}

/// Polynomial smooth minimum; equals `min(a, b)` once `|a - b| ≥ k`.
pub fn smooth_min(a: f64, b: f64, k: f64) -> f64 {
    let h = (0.5 + 0.5 * (b - a) / k).clamp(0.0, 1.0);
    b + (a - b) * h - k * h * (1.0 - h)
}

/// Exact signed distance to an axis-aligned ellipsoid.
fn ellipsoid_sdf(radii: Point, q: Point) -> f64 {
    // Sort axes so e0 >= e1 >= e2 and fold into the positive octant.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| radii[b].total_cmp(&radii[a]));
    let e = [radii[order[0]], radii[order[1]], radii[order[2]]];
    let y = [q[order[0]].abs(), q[order[1]].abs(), q[order[2]].abs()];
    let d = distance_point_ellipsoid(e, y);
    let inside = (y[0] / e[0]).powi(2) + (y[1] / e[1]).powi(2) + (y[2] / e[2]).powi(2) < 1.0;
    if inside {
        -d
    } else {
        d
    }
}

const BISECTION_LIMIT: usize = 1100;

fn root_ellipse(r0: f64, z0: f64, z1: f64, mut g: f64) -> f64 {
    let n0 = r0 * z0;
    let mut s0 = z1 - 1.0;
    let mut s1 = if g < 0.0 { 0.0 } else { n0.hypot(z1) - 1.0 };
    let mut s = 0.0;
    for _ in 0..BISECTION_LIMIT {
        s = 0.5 * (s0 + s1);
        if s == s0 || s == s1 {
            break;
        }
        let (a, b) = (n0 / (s + r0), z1 / (s + 1.0));
        g = a * a + b * b - 1.0;
        if g > 0.0 {
            s0 = s;
        } else if g < 0.0 {
            s1 = s;
        } else {
            break;
        }
    }
    s
}

fn root_ellipsoid(r0: f64, r1: f64, z: Point, mut g: f64) -> f64 {
    let (n0, n1) = (r0 * z[0], r1 * z[1]);
    let mut s0 = z[2] - 1.0;
    let mut s1 = if g < 0.0 { 0.0 } else { norm([n0, n1, z[2]]) - 1.0 };
    let mut s = 0.0;
    for _ in 0..BISECTION_LIMIT {
        s = 0.5 * (s0 + s1);
        if s == s0 || s == s1 {
            break;
        }
        let (a, b, c) = (n0 / (s + r0), n1 / (s + r1), z[2] / (s + 1.0));
        g = a * a + b * b + c * c - 1.0;
        if g > 0.0 {
            s0 = s;
        } else if g < 0.0 {
            s1 = s;
        } else {
            break;
        }
    }
    s
}

/// Distance from `y >= 0` to the ellipse with semi-axes `e0 >= e1`.
fn distance_point_ellipse(e0: f64, e1: f64, y0: f64, y1: f64) -> f64 {
    if y1 > 0.0 {
        if y0 > 0.0 {
            let (z0, z1) = (y0 / e0, y1 / e1);
            let g = z0 * z0 + z1 * z1 - 1.0;
            if g == 0.0 {
                return 0.0;
            }
            let r0 = (e0 / e1).powi(2);
            let s = root_ellipse(r0, z0, z1, g);
            let x0 = r0 * y0 / (s + r0);
            let x1 = y1 / (s + 1.0);
            (x0 - y0).hypot(x1 - y1)
        } else {
            (y1 - e1).abs()
        }
    } else {
        let (numer, denom) = (e0 * y0, e0 * e0 - e1 * e1);
        if numer < denom {
            let xde = numer / denom;
            let x0 = e0 * xde;
            let x1 = e1 * (1.0 - xde * xde).max(0.0).sqrt();
            (x0 - y0).hypot(x1)
        } else {
            (y0 - e0).abs()
        }
    }
}

/// Distance from `y >= 0` to the ellipsoid with semi-axes `e0 >= e1 >= e2`.
fn distance_point_ellipsoid(e: Point, y: Point) -> f64 {
    if y[2] > 0.0 {
        if y[1] > 0.0 {
            if y[0] > 0.0 {
                let z = [y[0] / e[0], y[1] / e[1], y[2] / e[2]];
                let g = z[0] * z[0] + z[1] * z[1] + z[2] * z[2] - 1.0;
                if g == 0.0 {
                    return 0.0;
                }
                let r0 = (e[0] / e[2]).powi(2);
                let r1 = (e[1] / e[2]).powi(2);
                let s = root_ellipsoid(r0, r1, z, g);
                let x = [r0 * y[0] / (s + r0), r1 * y[1] / (s + r1), y[2] / (s + 1.0)];
                norm([x[0] - y[0], x[1] - y[1], x[2] - y[2]])
            } else {
                distance_point_ellipse(e[1], e[2], y[1], y[2])
            }
        } else if y[0] > 0.0 {
            distance_point_ellipse(e[0], e[2], y[0], y[2])
        } else {
            (y[2] - e[2]).abs()
        }
    } else {
        let denom = [e[0] * e[0] - e[2] * e[2], e[1] * e[1] - e[2] * e[2]];
        let numer = [e[0] * y[0], e[1] * y[1]];
        if numer[0] < denom[0] && numer[1] < denom[1] {
            let xde = [numer[0] / denom[0], numer[1] / denom[1]];
            let discr = 1.0 - xde[0] * xde[0] - xde[1] * xde[1];
            if discr > 0.0 {
                let x = [e[0] * xde[0], e[1] * xde[1], e[2] * discr.sqrt()];
                return norm([x[0] - y[0], x[1] - y[1], x[2]]);
            }
        }
        distance_point_ellipse(e[0], e[1], y[0], y[1])
    }
}

/// Parameter ranges for a family of randomly posed ellipsoids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipsoidFamily {
    pub min_radius: f64,
    pub max_radius: f64,
    /// Maximum absolute rotation about each axis, radians.
    pub max_angle: f64,
    pub max_offset: f64,
}

impl Default for EllipsoidFamily {
    fn default() -> Self {
        Self { min_radius: 0.45, max_radius: 0.7, max_angle: 0.35, max_offset: 0.05 }
    }
}

impl EllipsoidFamily {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<AnalyticShape> {
        if !(0.0 < self.min_radius && self.min_radius <= self.max_radius) {
            return Err(Error::Config(format!(
                "ellipsoid radii range [{}, {}] is empty",
                self.min_radius, self.max_radius
            )));
        }
        // Redraw the pose until the shape fits; the ranges make this rare.
        for _ in 0..1000 {
            let mut radius = || {
                if self.max_radius > self.min_radius {
                    rng.random_range(self.min_radius..self.max_radius)
                } else {
                    self.min_radius
                }
            };
            let radii = [radius(), radius(), radius()];
            let mut angle = || if self.max_angle > 0.0 { rng.random_range(-self.max_angle..self.max_angle) } else { 0.0 };
            let rotation = rotation_from_euler(angle(), angle(), angle());
            let mut offset = || if self.max_offset > 0.0 { rng.random_range(-self.max_offset..self.max_offset) } else { 0.0 };
            let translation = [offset(), offset(), offset()];
            let shape = AnalyticShape::ellipsoid(radii).with_pose(rotation, translation);
            if shape.validate().is_ok() {
                return Ok(shape);
            }
        }
        Err(Error::Config("ellipsoid family does not fit inside the domain".into()))
    }
}

/// Synthetic dataset families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeFamily {
    Ellipsoid(EllipsoidFamily),
    /// Cycles through every primitive kind plus a two-sphere blend.
    Mixed,
}

impl ShapeFamily {
    pub fn sample<R: Rng + ?Sized>(&self, index: usize, rng: &mut R) -> Result<AnalyticShape> {
        match self {
            ShapeFamily::Ellipsoid(f) => f.sample(rng),
            ShapeFamily::Mixed => {
                let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
                let shape = match index % 5 {
                    0 => AnalyticShape::sphere(u(0.4, 0.7)),
                    1 => AnalyticShape::ellipsoid([u(0.4, 0.7), u(0.3, 0.6), u(0.3, 0.5)]),
                    2 => AnalyticShape::cuboid([u(0.3, 0.5), u(0.3, 0.5), u(0.3, 0.5)]),
                    3 => AnalyticShape::superquadric([u(0.4, 0.6), u(0.4, 0.6), u(0.4, 0.6)], u(0.5, 1.5), u(0.5, 1.5)),
                    _ => {
                        let a = AnalyticShape::sphere(u(0.3, 0.4)).with_pose(IDENTITY, [-0.3, 0.0, 0.0]);
                        let b = AnalyticShape::sphere(u(0.3, 0.4)).with_pose(IDENTITY, [0.3, 0.0, 0.0]);
                        AnalyticShape::smooth_union(a, b, 0.15)
                    }
                };
                shape.validate()?;
                Ok(shape)
            }
        }
    }
}

/// Reference mesh of an analytic shape: marching cubes on an `n`-lattice,
/// `smooth_iters` rounds of Laplacian smoothing (λ = 0.5) to even out the
/// triangles, then a few Newton steps per vertex back onto the zero level set.
pub fn ground_truth_mesh(shape: &AnalyticShape, n: usize, smooth_iters: usize) -> Result<TriMesh> {
    let grid = eval_sdf_grid(|p| Ok(shape.sdf(p)), n)?;
    let mesh = laplacian_smooth(&marching_cubes(&grid, 0.0), smooth_iters, 0.5)?;
    let vertices = mesh
        .vertices
        .iter()
        .map(|&v| {
            let mut p = v;
            for _ in 0..4 {
                let (d, g) = (shape.sdf(p), shape.gradient(p));
                let gg = g.iter().map(|x| x * x).sum::<f64>();
                if gg < 1e-12 {
                    break;
                }
                for k in 0..3 {
                    p[k] -= d * g[k] / gg;
                }
            }
            p
        })
        .collect();
    Ok(TriMesh { vertices, triangles: mesh.triangles })
}
