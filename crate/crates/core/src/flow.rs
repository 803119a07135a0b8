//! Fixed-step flow integration of a velocity field, dense lattice deformation
//! and the Jacobian-based regularizers.
//!
//! The forward flow solves `dΦ/dt = v(Φ, t)` on `[0, 1]` with `Φ(p, 0) = p`.
//! The inverse flow integrates `dΨ/ds = -v(Ψ, 1 - s)`, the exact time
//! reversal of the forward flow (for a stationary field it is simply `-v`).
//! Integration is differentiable by unrolling: [`integrate_taped`] records
//! every stage and [`flow_backward`] runs the adjoint of the discrete solver.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Point, Triplane, VelocityDecoder, VelocityTape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Rk4,
    Euler,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Inverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub steps: usize,
    pub solver: Solver,
    pub direction: Direction,
}

impl FlowConfig {
    pub fn forward(steps: usize) -> Self {
        Self { steps, solver: Solver::Rk4, direction: Direction::Forward }
    }

    pub fn inverse(steps: usize) -> Self {
        Self { steps, solver: Solver::Rk4, direction: Direction::Inverse }
    }

    pub fn with_solver(mut self, solver: Solver) -> Self {
        self.solver = solver;
        self
    }

    pub fn reversed(mut self) -> Self {
        self.direction = match self.direction {
            Direction::Forward => Direction::Inverse,
            Direction::Inverse => Direction::Forward,
        };
        self
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("flow needs at least one step".into()));
        }
        Ok(())
    }
}

/// Gradient sinks for a field's parameters. `None` skips that group.
#[derive(Debug, Default)]
pub struct FieldGrad<'a> {
    pub triplane: Option<&'a mut [f64]>,
    pub decoder: Option<&'a mut [f64]>,
}

/// A differentiable time-dependent velocity field.
pub trait VelocityField {
    type Tape;

    fn velocity(&self, q: Point, t: f64) -> Result<Point>;

    fn velocity_taped(&self, q: Point, t: f64) -> Result<(Point, Self::Tape)>;

    /// Accumulates parameter gradients of `upstream · v` and returns `∂/∂q`.
    fn velocity_backward(&self, tape: &Self::Tape, upstream: Point, grads: &mut FieldGrad<'_>) -> Result<Point>;
}

/// The learned field: a triplane decoded by a [`VelocityDecoder`].
#[derive(Debug, Clone, Copy)]
pub struct NeuralField<'a> {
    pub triplane: &'a Triplane,
    pub decoder: &'a VelocityDecoder,
}

impl<'a> NeuralField<'a> {
    pub fn new(triplane: &'a Triplane, decoder: &'a VelocityDecoder) -> Self {
        Self { triplane, decoder }
    }
}

impl VelocityField for NeuralField<'_> {
    type Tape = VelocityTape;

    fn velocity(&self, q: Point, t: f64) -> Result<Point> {
        self.decoder.velocity(self.triplane, q, t)
    }

    fn velocity_taped(&self, q: Point, t: f64) -> Result<(Point, VelocityTape)> {
        self.decoder.velocity_taped(self.triplane, q, t)
    }

    fn velocity_backward(&self, tape: &VelocityTape, upstream: Point, grads: &mut FieldGrad<'_>) -> Result<Point> {
        self.decoder.velocity_backward(
            self.triplane,
            tape,
            upstream,
            grads.decoder.as_deref_mut(),
            grads.triplane.as_deref_mut(),
        )
    }
}

/// Stationary linear field `v(q) = A·q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearField {
    pub matrix: [[f64; 3]; 3],
}

pub(crate) fn mat_vec(a: &[[f64; 3]; 3], v: Point) -> Point {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

impl VelocityField for LinearField {
    type Tape = ();

    fn velocity(&self, q: Point, _t: f64) -> Result<Point> {
        Ok(mat_vec(&self.matrix, q))
    }

    fn velocity_taped(&self, q: Point, t: f64) -> Result<(Point, ())> {
        Ok((self.velocity(q, t)?, ()))
    }

    fn velocity_backward(&self, _tape: &(), u: Point, _grads: &mut FieldGrad<'_>) -> Result<Point> {
        let a = &self.matrix;
        Ok([
            a[0][0] * u[0] + a[1][0] * u[1] + a[2][0] * u[2],
            a[0][1] * u[0] + a[1][1] * u[1] + a[2][1] * u[2],
            a[0][2] * u[0] + a[1][2] * u[1] + a[2][2] * u[2],
        ])
    }
}

/// The identity flow.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroField;

impl VelocityField for ZeroField {
    type Tape = ();

    fn velocity(&self, _q: Point, _t: f64) -> Result<Point> {
        Ok([0.0; 3])
    }

    fn velocity_taped(&self, _q: Point, _t: f64) -> Result<(Point, ())> {
        Ok(([0.0; 3], ()))
    }

    fn velocity_backward(&self, _: &(), _: Point, _: &mut FieldGrad<'_>) -> Result<Point> {
        Ok([0.0; 3])
    }
}

#[inline]
fn add_scaled(a: Point, s: f64, b: Point) -> Point {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

#[inline]
fn direction_sign_time(dir: Direction, s: f64) -> (f64, f64) {
    match dir {
        Direction::Forward => (1.0, s),
        Direction::Inverse => (-1.0, 1.0 - s),
    }
}

fn eval<F: VelocityField>(field: &F, dir: Direction, q: Point, s: f64) -> Result<Point> {
    let (sign, t) = direction_sign_time(dir, s);
    let v = field.velocity(q, t)?;
    Ok([sign * v[0], sign * v[1], sign * v[2]])
}

fn eval_taped<F: VelocityField>(field: &F, dir: Direction, q: Point, s: f64) -> Result<(Point, F::Tape)> {
    let (sign, t) = direction_sign_time(dir, s);
    let (v, tape) = field.velocity_taped(q, t)?;
    Ok(([sign * v[0], sign * v[1], sign * v[2]], tape))
}

fn check_state(p: Point, step: usize) -> Result<()> {
    if p.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { step })
    }
}

/// Integrates `p` over `[0, 1]` in the configured direction.
pub fn integrate<F: VelocityField>(field: &F, p: Point, cfg: &FlowConfig) -> Result<Point> {
    cfg.validate()?;
    let h = 1.0 / cfg.steps as f64;
    let dir = cfg.direction;
    let mut y = p;
    for step in 0..cfg.steps {
        let s = step as f64 * h;
        y = match cfg.solver {
            Solver::Euler => add_scaled(y, h, eval(field, dir, y, s)?),
            Solver::Rk4 => {
                let k1 = eval(field, dir, y, s)?;
                let k2 = eval(field, dir, add_scaled(y, 0.5 * h, k1), s + 0.5 * h)?;
                let k3 = eval(field, dir, add_scaled(y, 0.5 * h, k2), s + 0.5 * h)?;
                let k4 = eval(field, dir, add_scaled(y, h, k3), s + h)?;
                [
                    y[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
                    y[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
                    y[2] + h / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
                ]
            }
        };
        check_state(y, step)?;
    }
    Ok(y)
}

fn require(cfg: &FlowConfig, dir: Direction) -> Result<()> {
    if cfg.direction != dir {
        return Err(Error::Config(format!("expected a {dir:?} flow config, got {:?}", cfg.direction)));
    }
    Ok(())
}

/// Φ(p, 1): instance space → template space.
pub fn integrate_forward<F: VelocityField>(field: &F, p: Point, cfg: &FlowConfig) -> Result<Point> {
    require(cfg, Direction::Forward)?;
    integrate(field, p, cfg)
}

/// Ψ(p, 1): template space → instance space.
pub fn integrate_inverse<F: VelocityField>(field: &F, p: Point, cfg: &FlowConfig) -> Result<Point> {
    require(cfg, Direction::Inverse)?;
    integrate(field, p, cfg)
}

/// Stage records of one integrated trajectory.
#[derive(Debug)]
pub struct FlowTape<T> {
    cfg: FlowConfig,
    /// Per step, one tape per solver stage.
    stages: Vec<Vec<T>>,
}

/// Like [`integrate`], recording every stage for [`flow_backward`].
pub fn integrate_taped<F: VelocityField>(field: &F, p: Point, cfg: &FlowConfig) -> Result<(Point, FlowTape<F::Tape>)> {
    cfg.validate()?;
    let h = 1.0 / cfg.steps as f64;
    let dir = cfg.direction;
    let mut y = p;
    let mut stages = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let s = step as f64 * h;
        match cfg.solver {
            Solver::Euler => {
                let (k1, t1) = eval_taped(field, dir, y, s)?;
                y = add_scaled(y, h, k1);
                stages.push(vec![t1]);
            }
            Solver::Rk4 => {
                let (k1, t1) = eval_taped(field, dir, y, s)?;
                let (k2, t2) = eval_taped(field, dir, add_scaled(y, 0.5 * h, k1), s + 0.5 * h)?;
                let (k3, t3) = eval_taped(field, dir, add_scaled(y, 0.5 * h, k2), s + 0.5 * h)?;
                let (k4, t4) = eval_taped(field, dir, add_scaled(y, h, k3), s + h)?;
                for c in 0..3 {
                    y[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
                }
                stages.push(vec![t1, t2, t3, t4]);
            }
        }
        check_state(y, step)?;
    }
    Ok((y, FlowTape { cfg: *cfg, stages }))
}

/// Adjoint of the discrete solver. Given `∂L/∂Φ(p,1)`, accumulates parameter
/// gradients into `grads` and returns `∂L/∂p`.
pub fn flow_backward<F: VelocityField>(
    field: &F,
    tape: &FlowTape<F::Tape>,
    upstream: Point,
    grads: &mut FieldGrad<'_>,
) -> Result<Point> {
    let h = 1.0 / tape.cfg.steps as f64;
    let sign = match tape.cfg.direction {
        Direction::Forward => 1.0,
        Direction::Inverse => -1.0,
    };
    let back = |t: &F::Tape, g: Point, grads: &mut FieldGrad<'_>| -> Result<Point> {
        field.velocity_backward(t, [sign * g[0], sign * g[1], sign * g[2]], grads)
    };
    let mut gy = upstream;
    for stages in tape.stages.iter().rev() {
        match tape.cfg.solver {
            Solver::Euler => {
                let gq = back(&stages[0], [h * gy[0], h * gy[1], h * gy[2]], grads)?;
                gy = add_scaled(gy, 1.0, gq);
            }
            Solver::Rk4 => {
                let mut dk1 = [h / 6.0 * gy[0], h / 6.0 * gy[1], h / 6.0 * gy[2]];
                let mut dk2 = [h / 3.0 * gy[0], h / 3.0 * gy[1], h / 3.0 * gy[2]];
                let mut dk3 = dk2;
                let dk4 = dk1;
                let mut gy0 = gy;
                let g4 = back(&stages[3], dk4, grads)?;
                gy0 = add_scaled(gy0, 1.0, g4);
                dk3 = add_scaled(dk3, h, g4);
                let g3 = back(&stages[2], dk3, grads)?;
                gy0 = add_scaled(gy0, 1.0, g3);
                dk2 = add_scaled(dk2, 0.5 * h, g3);
                let g2 = back(&stages[1], dk2, grads)?;
                gy0 = add_scaled(gy0, 1.0, g2);
                dk1 = add_scaled(dk1, 0.5 * h, g2);
                let g1 = back(&stages[0], dk1, grads)?;
                gy = add_scaled(gy0, 1.0, g1);
            }
        }
    }
    Ok(gy)
}

/// Flowed positions of the regular `N³` lattice over `[-1, 1]³`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationGrid {
    n: usize,
    /// Row-major `[i][j][k]` with `i` along x.
    positions: Vec<Point>,
}

const GRID_MAGIC: &[u8; 4] = b"DFGR";
const GRID_VERSION: u32 = 1;

impl DeformationGrid {
    pub fn from_positions(n: usize, positions: Vec<Point>) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!("deformation grid needs N >= 2, got {n}")));
        }
        if positions.len() != n * n * n {
            return Err(Error::Shape { context: "deformation grid", expected: n * n * n, actual: positions.len() });
        }
        if let Some(index) = positions.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { context: "deformation grid", index });
        }
        Ok(Self { n, positions })
    }

    /// The undeformed lattice.
    pub fn identity(n: usize) -> Result<Self> {
        let positions = (0..n * n * n).map(|idx| lattice_point(n, idx)).collect();
        Self::from_positions(n, positions)
    }

    /// Lattice with every source point mapped through `map`.
    pub fn from_map(n: usize, mut map: impl FnMut(Point) -> Point) -> Result<Self> {
        let positions = (0..n * n * n).map(|idx| map(lattice_point(n, idx))).collect();
        Self::from_positions(n, positions)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        2.0 / (self.n - 1) as f64
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.n + j) * self.n + k
    }

    pub fn source_point(&self, i: usize, j: usize, k: usize) -> Point {
        lattice_point(self.n, self.index(i, j, k))
    }

    pub fn position(&self, i: usize, j: usize, k: usize) -> Point {
        self.positions[self.index(i, j, k)]
    }

    /// Binary layout: `b"DFGR"`, u32 version, u32 N, then `N³` little-endian
    /// f64 triples in row-major `[i][j][k]` order.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(GRID_MAGIC)?;
        w.write_all(&GRID_VERSION.to_le_bytes())?;
        w.write_all(&(self.n as u32).to_le_bytes())?;
        for p in &self.positions {
            for v in p {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != GRID_MAGIC {
            return Err(Error::Format("not a deformation grid file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != GRID_VERSION {
            return Err(Error::Format(format!("unsupported deformation grid version {version}")));
        }
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() != n * n * n * 24 {
            return Err(Error::Format("truncated deformation grid".into()));
        }
        let positions = body
            .chunks_exact(24)
            .map(|c| {
                let f = |o: usize| f64::from_le_bytes(c[o..o + 8].try_into().unwrap());
                [f(0), f(8), f(16)]
            })
            .collect();
        Self::from_positions(n, positions)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&fs::read(path)?)
    }

    /// Point cloud as OBJ `v` records.
    pub fn write_obj_points<W: Write>(&self, mut w: W) -> Result<()> {
        for p in &self.positions {
            writeln!(w, "v {} {} {}", p[0], p[1], p[2])?;
        }
        Ok(())
    }
}

/// Source position of flat lattice index `idx` for an `n³` lattice.
pub fn lattice_point(n: usize, idx: usize) -> Point {
    let h = 2.0 / (n - 1) as f64;
    let (i, j, k) = (idx / (n * n), (idx / n) % n, idx % n);
    [-1.0 + i as f64 * h, -1.0 + j as f64 * h, -1.0 + k as f64 * h]
}

/// Integrates every lattice point forward.
pub fn deform_grid<F: VelocityField>(field: &F, n: usize, cfg: &FlowConfig) -> Result<DeformationGrid> {
    if n < 3 {
        return Err(Error::Config(format!("deform_grid needs N >= 3, got {n}")));
    }
    require(cfg, Direction::Forward)?;
    let positions = (0..n * n * n)
        .map(|idx| integrate(field, lattice_point(n, idx), cfg))
        .collect::<Result<Vec<_>>>()?;
    DeformationGrid::from_positions(n, positions)
}

/// Central-difference Jacobians at interior lattice points.
#[derive(Debug, Clone)]
pub struct JacobianField {
    pub n: usize,
    /// `(N-2)³` determinants, row-major over interior indices.
    pub determinants: Vec<f64>,
    pub jacobians: Vec<[[f64; 3]; 3]>,
}

impl JacobianField {
    /// Fraction of interior points with a strictly positive determinant.
    pub fn positive_fraction(&self) -> f64 {
        if self.determinants.is_empty() {
            return 1.0;
        }
        self.determinants.iter().filter(|&&d| d > 0.0).count() as f64 / self.determinants.len() as f64
    }
}

pub(crate) fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// `∂det/∂m`, the cofactor matrix.
fn det3_grad(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    [
        [
            m[1][1] * m[2][2] - m[1][2] * m[2][1],
            m[1][2] * m[2][0] - m[1][0] * m[2][2],
            m[1][0] * m[2][1] - m[1][1] * m[2][0],
        ],
        [
            m[0][2] * m[2][1] - m[0][1] * m[2][2],
            m[0][0] * m[2][2] - m[0][2] * m[2][0],
            m[0][1] * m[2][0] - m[0][0] * m[2][1],
        ],
        [
            m[0][1] * m[1][2] - m[0][2] * m[1][1],
            m[0][2] * m[1][0] - m[0][0] * m[1][2],
            m[0][0] * m[1][1] - m[0][1] * m[1][0],
        ],
    ]
}

/// Neighbor indices `(minus, plus)` along each axis of interior point `(i, j, k)`.
fn neighbors(dg: &DeformationGrid, i: usize, j: usize, k: usize) -> [(usize, usize); 3] {
    [
        (dg.index(i - 1, j, k), dg.index(i + 1, j, k)),
        (dg.index(i, j - 1, k), dg.index(i, j + 1, k)),
        (dg.index(i, j, k - 1), dg.index(i, j, k + 1)),
    ]
}

fn interior(n: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    (1..n - 1).flat_map(move |i| (1..n - 1).flat_map(move |j| (1..n - 1).map(move |k| (i, j, k))))
}

fn jacobian_at(dg: &DeformationGrid, i: usize, j: usize, k: usize) -> [[f64; 3]; 3] {
    let inv = 1.0 / (2.0 * dg.spacing());
    let nb = neighbors(dg, i, j, k);
    let mut m = [[0.0; 3]; 3];
    for (c, (lo, hi)) in nb.iter().enumerate() {
        let (a, b) = (dg.positions[*lo], dg.positions[*hi]);
        for r in 0..3 {
            m[r][c] = (b[r] - a[r]) * inv;
        }
    }
    m
}

pub fn jacobian_grid(dg: &DeformationGrid) -> Result<JacobianField> {
    if dg.n < 3 {
        return Err(Error::Config(format!("jacobian_grid needs N >= 3, got {}", dg.n)));
    }
    let jacobians: Vec<_> = interior(dg.n).map(|(i, j, k)| jacobian_at(dg, i, j, k)).collect();
    let determinants = jacobians.iter().map(det3).collect();
    Ok(JacobianField { n: dg.n, determinants, jacobians })
}

/// Mean over interior points of `relu(-det J)`.
pub fn loss_jdet(jf: &JacobianField) -> f64 {
    if jf.determinants.is_empty() {
        return 0.0;
    }
    jf.determinants.iter().map(|d| (-d).max(0.0)).sum::<f64>() / jf.determinants.len() as f64
}

/// Sum over interior points of `‖J - I‖²_F`, the squared displacement gradient.
pub fn loss_def(dg: &DeformationGrid) -> f64 {
    interior(dg.n)
        .map(|(i, j, k)| {
            let m = jacobian_at(dg, i, j, k);
            let mut s = 0.0;
            for r in 0..3 {
                for c in 0..3 {
                    let d = m[r][c] - if r == c { 1.0 } else { 0.0 };
                    s += d * d;
                }
            }
            s
        })
        .sum()
}

/// Scatters `∂L/∂J` at interior point `(i, j, k)` onto the lattice positions.
fn scatter_jacobian_grad(dg: &DeformationGrid, i: usize, j: usize, k: usize, gj: &[[f64; 3]; 3], out: &mut [Point]) {
    let inv = 1.0 / (2.0 * dg.spacing());
    for (c, (lo, hi)) in neighbors(dg, i, j, k).iter().enumerate() {
        for r in 0..3 {
            out[*hi][r] += gj[r][c] * inv;
            out[*lo][r] -= gj[r][c] * inv;
        }
    }
}

/// Value and position gradient of `w_jdet·L_Jdet + w_def·L_def`.
pub fn deformation_losses_grad(dg: &DeformationGrid, w_jdet: f64, w_def: f64) -> (f64, f64, Vec<Point>) {
    let mut grad = vec![[0.0; 3]; dg.positions.len()];
    let m = (dg.n - 2).pow(3) as f64;
    let (mut jdet, mut def) = (0.0, 0.0);
    for (i, j, k) in interior(dg.n) {
        let jac = jacobian_at(dg, i, j, k);
        let det = det3(&jac);
        let mut gj = [[0.0; 3]; 3];
        if det < 0.0 {
            jdet -= det / m;
            let cof = det3_grad(&jac);
            for r in 0..3 {
                for c in 0..3 {
                    gj[r][c] -= w_jdet * cof[r][c] / m;
                }
            }
        }
        for r in 0..3 {
            for c in 0..3 {
                let d = jac[r][c] - if r == c { 1.0 } else { 0.0 };
                def += d * d;
                gj[r][c] += w_def * 2.0 * d;
            }
        }
        scatter_jacobian_grad(dg, i, j, k, &gj, &mut grad);
    }
    (jdet, def, grad)
}
