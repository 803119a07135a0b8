//! Triplane feature grids, the velocity decoder that turns triplane features
//! into a velocity field, and the template signed distance network.
//!
//! A [`Triplane`] holds three `L × L × C` planes over the cube `[-1, 1]³`.
//! Texel `(i, j)` of a plane is centered at
//! `(-1 + (2i + 1)/L, -1 + (2j + 1)/L)` in the plane's two coordinates; queries
//! beyond the outermost texel centers clamp to the boundary row or column.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{check_finite, Error, Result};
use crate::nets::{Activation, Mlp, MlpTrace, OutputActivation};

pub type Point = [f64; 3];

/// The three axis-aligned planes, in storage and concatenation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Plane {
    Xy,
    Xz,
    Yz,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Xy, Plane::Xz, Plane::Yz];

    /// The two point coordinates this plane is indexed by.
    pub fn axes(self) -> (usize, usize) {
        match self {
            Plane::Xy => (0, 1),
            Plane::Xz => (0, 2),
            Plane::Yz => (1, 2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triplane {
    res: usize,
    channels: usize,
    /// `[plane][i][j][c]`, row-major.
    data: Vec<f64>,
}

/// One axis of a bilinear lookup.
#[derive(Debug, Clone, Copy)]
struct AxisCell {
    index: usize,
    frac: f64,
    /// d(frac)/d(coordinate); zero where the query is clamped.
    dfrac: f64,
}

fn axis_cell(coord: f64, res: usize) -> AxisCell {
    let u = (coord + 1.0) * res as f64 * 0.5 - 0.5;
    let last = (res - 1) as f64;
    if u <= 0.0 {
        AxisCell { index: 0, frac: 0.0, dfrac: 0.0 }
    } else if u >= last {
        AxisCell { index: res - 2, frac: 1.0, dfrac: 0.0 }
    } else {
        let index = (u.floor() as usize).min(res - 2);
        AxisCell { index, frac: u - index as f64, dfrac: res as f64 * 0.5 }
    }
}

/// Bilinear stencils of one query on all three planes.
#[derive(Debug, Clone)]
pub struct TriplaneStencil {
    cells: [(AxisCell, AxisCell); 3],
}

const TRIPLANE_MAGIC: &[u8; 4] = b"TPLN";
const TRIPLANE_VERSION: u32 = 1;

impl Triplane {
    pub fn zeros(res: usize, channels: usize) -> Result<Self> {
        if res < 2 || channels == 0 {
            return Err(Error::Config(format!(
                "triplane needs resolution >= 2 and at least one channel, got L={res}, C={channels}"
            )));
        }
        Ok(Self { res, channels, data: vec![0.0; 3 * res * res * channels] })
    }

    pub fn from_data(res: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let mut tp = Self::zeros(res, channels)?;
        if data.len() != tp.data.len() {
            return Err(Error::Shape { context: "triplane data", expected: tp.data.len(), actual: data.len() });
        }
        check_finite("triplane data", &data)?;
        tp.data = data;
        Ok(tp)
    }

    /// Features drawn i.i.d. from `N(0, std²)`.
    pub fn random<R: Rng + ?Sized>(res: usize, channels: usize, std: f64, rng: &mut R) -> Result<Self> {
        let mut tp = Self::zeros(res, channels)?;
        for v in &mut tp.data {
            *v = std * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        Ok(tp)
    }

    pub fn resolution(&self) -> usize {
        self.res
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Length of a query result, `3C`.
    pub fn feature_dim(&self) -> usize {
        3 * self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn plane_len(&self) -> usize {
        self.res * self.res * self.channels
    }

    pub fn plane(&self, plane: Plane) -> &[f64] {
        let n = self.plane_len();
        &self.data[plane as usize * n..(plane as usize + 1) * n]
    }

    pub fn plane_mut(&mut self, plane: Plane) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[plane as usize * n..(plane as usize + 1) * n]
    }

    #[inline]
    pub fn texel_offset(&self, plane: Plane, i: usize, j: usize) -> usize {
        ((plane as usize * self.res + i) * self.res + j) * self.channels
    }

    pub fn texel(&self, plane: Plane, i: usize, j: usize) -> &[f64] {
        let o = self.texel_offset(plane, i, j);
        &self.data[o..o + self.channels]
    }

    pub fn texel_mut(&mut self, plane: Plane, i: usize, j: usize) -> &mut [f64] {
        let o = self.texel_offset(plane, i, j);
        let c = self.channels;
        &mut self.data[o..o + c]
    }

    /// Domain coordinate of texel center `i` along either plane axis.
    pub fn texel_center(&self, i: usize) -> f64 {
        -1.0 + (2 * i + 1) as f64 / self.res as f64
    }

    pub fn stencil(&self, p: Point) -> Result<TriplaneStencil> {
        check_finite("triplane query point", &p)?;
        let cells = Plane::ALL.map(|plane| {
            let (a, b) = plane.axes();
            (axis_cell(p[a], self.res), axis_cell(p[b], self.res))
        });
        Ok(TriplaneStencil { cells })
    }

    /// Concatenated bilinear features `(xy, xz, yz)` at `p`, written into `out`.
    pub fn query_into(&self, stencil: &TriplaneStencil, out: &mut [f64]) {
        let c = self.channels;
        for (k, plane) in Plane::ALL.into_iter().enumerate() {
            let (cu, cv) = stencil.cells[k];
            let (fu, fv) = (cu.frac, cv.frac);
            let weights = [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv];
            let offs = [
                self.texel_offset(plane, cu.index, cv.index),
                self.texel_offset(plane, cu.index + 1, cv.index),
                self.texel_offset(plane, cu.index, cv.index + 1),
                self.texel_offset(plane, cu.index + 1, cv.index + 1),
            ];
            let dst = &mut out[k * c..(k + 1) * c];
            dst.fill(0.0);
            for (w, o) in weights.iter().zip(offs) {
                if *w != 0.0 {
                    for (d, t) in dst.iter_mut().zip(&self.data[o..o + c]) {
                        *d += w * t;
                    }
                }
            }
        }
    }

    pub fn query(&self, p: Point) -> Result<Vec<f64>> {
        let st = self.stencil(p)?;
        let mut out = vec![0.0; self.feature_dim()];
        self.query_into(&st, &mut out);
        Ok(out)
    }

    /// Reverse pass of a query: accumulates texel gradients (when requested)
    /// and returns the gradient with respect to the query point.
    pub fn query_backward(
        &self,
        stencil: &TriplaneStencil,
        upstream: &[f64],
        texel_grad: Option<&mut [f64]>,
    ) -> Point {
        let c = self.channels;
        let mut gp = [0.0; 3];
        let mut tg = texel_grad;
        for (k, plane) in Plane::ALL.into_iter().enumerate() {
            let (cu, cv) = stencil.cells[k];
            let (fu, fv) = (cu.frac, cv.frac);
            let g = &upstream[k * c..(k + 1) * c];
            let o00 = self.texel_offset(plane, cu.index, cv.index);
            let o10 = self.texel_offset(plane, cu.index + 1, cv.index);
            let o01 = self.texel_offset(plane, cu.index, cv.index + 1);
            let o11 = self.texel_offset(plane, cu.index + 1, cv.index + 1);
            if let Some(tg) = tg.as_deref_mut() {
                let weights = [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv];
                for (w, o) in weights.iter().zip([o00, o10, o01, o11]) {
                    if *w != 0.0 {
                        for (t, gi) in tg[o..o + c].iter_mut().zip(g) {
                            *t += w * gi;
                        }
                    }
                }
            }
            if cu.dfrac != 0.0 || cv.dfrac != 0.0 {
                let (t00, t10) = (&self.data[o00..o00 + c], &self.data[o10..o10 + c]);
                let (t01, t11) = (&self.data[o01..o01 + c], &self.data[o11..o11 + c]);
                let (mut du, mut dv) = (0.0, 0.0);
                for ch in 0..c {
                    du += g[ch] * ((1.0 - fv) * (t10[ch] - t00[ch]) + fv * (t11[ch] - t01[ch]));
                    dv += g[ch] * ((1.0 - fu) * (t01[ch] - t00[ch]) + fu * (t11[ch] - t10[ch]));
                }
                let (a, b) = plane.axes();
                gp[a] += du * cu.dfrac;
                gp[b] += dv * cv.dfrac;
            }
        }
        gp
    }

    /// Channel-major image export `[3C][L][L]`: channels `0..C` are the xy
    /// plane, `C..2C` xz and `2C..3C` yz.
    pub fn to_channels(&self) -> Vec<f64> {
        let (l, c) = (self.res, self.channels);
        let mut out = vec![0.0; 3 * c * l * l];
        for (k, plane) in Plane::ALL.into_iter().enumerate() {
            for i in 0..l {
                for j in 0..l {
                    for (ch, v) in self.texel(plane, i, j).iter().enumerate() {
                        out[((k * c + ch) * l + i) * l + j] = *v;
                    }
                }
            }
        }
        out
    }

    /// Inverse of [`Triplane::to_channels`]: splits a `3C`-channel image into the three planes.
    pub fn from_channels(res: usize, channels: usize, image: &[f64]) -> Result<Self> {
        let mut tp = Self::zeros(res, channels)?;
        if image.len() != tp.data.len() {
            return Err(Error::Shape { context: "triplane image", expected: tp.data.len(), actual: image.len() });
        }
        check_finite("triplane image", image)?;
        let (l, c) = (res, channels);
        for (k, plane) in Plane::ALL.into_iter().enumerate() {
            for i in 0..l {
                for j in 0..l {
                    let o = tp.texel_offset(plane, i, j);
                    for ch in 0..c {
                        tp.data[o + ch] = image[((k * c + ch) * l + i) * l + j];
                    }
                }
            }
        }
        Ok(tp)
    }

    /// Binary layout: `b"TPLN"`, u32 version, u32 L, u32 C, then `3·L·L·C`
    /// little-endian f64 in `[plane][i][j][c]` order.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(TRIPLANE_MAGIC)?;
        for v in [TRIPLANE_VERSION, self.res as u32, self.channels as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TRIPLANE_MAGIC {
            return Err(Error::Format("not a triplane file".into()));
        }
        let mut word = [0u8; 4];
        let mut header = [0u32; 3];
        for h in &mut header {
            r.read_exact(&mut word)?;
            *h = u32::from_le_bytes(word);
        }
        if header[0] != TRIPLANE_VERSION {
            return Err(Error::Format(format!("unsupported triplane version {}", header[0])));
        }
        let (res, channels) = (header[1] as usize, header[2] as usize);
        let mut data = vec![0.0; 3 * res * res * channels];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        Self::from_data(res, channels, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 8 * self.data.len());
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(fs::read(path)?.as_slice())
    }
}

/// Functional alias of [`Triplane::query`].
pub fn triplane_query(tp: &Triplane, p: Point) -> Result<Vec<f64>> {
    tp.query(p)
}

#[inline]
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Anisotropic L1 total variation over all planes and channels.
pub fn triplane_tv(tp: &Triplane) -> f64 {
    let mut total = 0.0;
    let (l, c) = (tp.res, tp.channels);
    for plane in Plane::ALL {
        for i in 0..l {
            for j in 0..l {
                let o = tp.texel_offset(plane, i, j);
                for ch in 0..c {
                    let v = tp.data[o + ch];
                    if i + 1 < l {
                        total += (tp.data[tp.texel_offset(plane, i + 1, j) + ch] - v).abs();
                    }
                    if j + 1 < l {
                        total += (tp.data[tp.texel_offset(plane, i, j + 1) + ch] - v).abs();
                    }
                }
            }
        }
    }
    total
}

/// Accumulates `scale · ∂TV/∂texels` using `sign(0) = 0`.
pub fn triplane_tv_grad(tp: &Triplane, scale: f64, grad: &mut [f64]) {
    let (l, c) = (tp.res, tp.channels);
    for plane in Plane::ALL {
        for i in 0..l {
            for j in 0..l {
                let o = tp.texel_offset(plane, i, j);
                for ch in 0..c {
                    let v = tp.data[o + ch];
                    if i + 1 < l {
                        let on = tp.texel_offset(plane, i + 1, j) + ch;
                        let s = scale * sign0(tp.data[on] - v);
                        grad[on] += s;
                        grad[o + ch] -= s;
                    }
                    if j + 1 < l {
                        let on = tp.texel_offset(plane, i, j + 1) + ch;
                        let s = scale * sign0(tp.data[on] - v);
                        grad[on] += s;
                        grad[o + ch] -= s;
                    }
                }
            }
        }
    }
}

/// Sum of the three plane Frobenius norms.
pub fn triplane_l2(tp: &Triplane) -> f64 {
    Plane::ALL
        .iter()
        .map(|&p| tp.plane(p).iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum()
}

/// Accumulates `scale · ∂L2/∂texels`; a zero plane contributes a zero subgradient.
pub fn triplane_l2_grad(tp: &Triplane, scale: f64, grad: &mut [f64]) {
    let n = tp.plane_len();
    for (k, plane) in Plane::ALL.into_iter().enumerate() {
        let values = tp.plane(plane);
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (g, v) in grad[k * n..(k + 1) * n].iter_mut().zip(values) {
                *g += scale * v / norm;
            }
        }
    }
}

/// Maps `[features ⊕ q ⊕ t]` to a velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityDecoder {
    pub net: Mlp,
    /// When false the decoder input omits `t` and the field is stationary.
    pub use_time: bool,
}

/// Forward record of one velocity evaluation.
#[derive(Debug, Clone)]
pub struct VelocityTape {
    stencil: TriplaneStencil,
    trace: MlpTrace,
}

impl VelocityDecoder {
    pub fn input_dim(channels: usize, use_time: bool) -> usize {
        3 * channels + 3 + usize::from(use_time)
    }

    /// Randomly initialized decoder whose output layer is zero, so it starts
    /// as the zero velocity field.
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        hidden: &[usize],
        activation: Activation,
        use_time: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![Self::input_dim(channels, use_time)];
        dims.extend_from_slice(hidden);
        dims.push(3);
        let mut net = Mlp::new(&dims, activation, OutputActivation::Identity, rng)?;
        net.zero_last_layer();
        Ok(Self { net, use_time })
    }

    pub fn from_net(net: Mlp, use_time: bool) -> Result<Self> {
        if net.output_dim() != 3 || net.input_dim() < 3 + usize::from(use_time) + 3 {
            return Err(Error::Config(format!(
                "velocity decoder needs 3C+3{} inputs and 3 outputs, got {:?}",
                if use_time { "+1" } else { "" },
                net.layer_dims()
            )));
        }
        Ok(Self { net, use_time })
    }

    pub fn channels(&self) -> usize {
        (self.net.input_dim() - 3 - usize::from(self.use_time)) / 3
    }

    fn check(&self, tp: &Triplane) -> Result<()> {
        if tp.channels() != self.channels() {
            return Err(Error::Shape { context: "decoder channels", expected: self.channels(), actual: tp.channels() });
        }
        Ok(())
    }

    fn assemble(&self, tp: &Triplane, stencil: &TriplaneStencil, q: Point, t: f64) -> Vec<f64> {
        let fd = tp.feature_dim();
        let mut input = vec![0.0; self.net.input_dim()];
        tp.query_into(stencil, &mut input[..fd]);
        input[fd..fd + 3].copy_from_slice(&q);
        if self.use_time {
            input[fd + 3] = t;
        }
        input
    }

    pub fn velocity(&self, tp: &Triplane, q: Point, t: f64) -> Result<Point> {
        self.check(tp)?;
        let st = tp.stencil(q)?;
        let out = self.net.eval(&self.assemble(tp, &st, q, t))?;
        Ok([out[0], out[1], out[2]])
    }

    pub fn velocity_taped(&self, tp: &Triplane, q: Point, t: f64) -> Result<(Point, VelocityTape)> {
        self.check(tp)?;
        let stencil = tp.stencil(q)?;
        let trace = self.net.forward_traced(&self.assemble(tp, &stencil, q, t))?;
        let o = trace.output();
        let v = [o[0], o[1], o[2]];
        Ok((v, VelocityTape { stencil, trace }))
    }

    /// Reverse pass of [`VelocityDecoder::velocity_taped`]; returns the gradient
    /// with respect to the query point `q`.
    pub fn velocity_backward(
        &self,
        tp: &Triplane,
        tape: &VelocityTape,
        upstream: Point,
        decoder_grad: Option<&mut [f64]>,
        texel_grad: Option<&mut [f64]>,
    ) -> Result<Point> {
        let gin = self.net.backward(&tape.trace, &upstream, decoder_grad)?;
        let fd = tp.feature_dim();
        let mut gq = tp.query_backward(&tape.stencil, &gin[..fd], texel_grad);
        for k in 0..3 {
            gq[k] += gin[fd + k];
        }
        Ok(gq)
    }
}

/// Functional form of [`VelocityDecoder::velocity`].
pub fn velocity(tp: &Triplane, dec: &VelocityDecoder, q: Point, t: f64) -> Result<Point> {
    dec.velocity(tp, q, t)
}

/// Implicit template shape: point → signed distance (negative inside).
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSdf {
    pub net: Mlp,
}

impl TemplateSdf {
    pub fn new<R: Rng + ?Sized>(hidden: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        let mut dims = vec![3];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Ok(Self { net: Mlp::new(&dims, activation, OutputActivation::Identity, rng)? })
    }

    pub fn from_net(net: Mlp) -> Result<Self> {
        if net.input_dim() != 3 || net.output_dim() != 1 {
            return Err(Error::Config(format!("template network must map 3 → 1, got {:?}", net.layer_dims())));
        }
        Ok(Self { net })
    }

    pub fn sdf(&self, p: Point) -> Result<f64> {
        check_finite("template query point", &p)?;
        Ok(self.net.eval(&p)?[0])
    }

    pub fn sdf_traced(&self, p: Point) -> Result<(f64, MlpTrace)> {
        check_finite("template query point", &p)?;
        let trace = self.net.forward_traced(&p)?;
        Ok((trace.output()[0], trace))
    }

    /// Returns `∂(upstream · sdf)/∂p`, accumulating parameter gradients when requested.
    pub fn backward(&self, trace: &MlpTrace, upstream: f64, param_grad: Option<&mut [f64]>) -> Result<Point> {
        let g = self.net.backward(trace, &[upstream], param_grad)?;
        Ok([g[0], g[1], g[2]])
    }

    /// Spatial gradient of the signed distance.
    pub fn gradient(&self, p: Point) -> Result<Point> {
        let (_, trace) = self.sdf_traced(p)?;
        self.backward(&trace, 1.0, None)
    }
}

/// Functional form of [`TemplateSdf::sdf`].
pub fn template_sdf(tmpl: &TemplateSdf, p: Point) -> Result<f64> {
    tmpl.sdf(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn texel_center_query_returns_stored_features() {
        let tp = Triplane::random(4, 2, 1.0, &mut rng(1)).unwrap();
        let (i, j, k) = (1, 2, 3);
        let p = [tp.texel_center(i), tp.texel_center(j), tp.texel_center(k)];
        let f = tp.query(p).unwrap();
        let expected: Vec<f64> = [tp.texel(Plane::Xy, i, j), tp.texel(Plane::Xz, i, k), tp.texel(Plane::Yz, j, k)].concat();
        for (a, b) in f.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_planes_give_constant_features() {
        let tp = Triplane::from_data(5, 3, vec![0.75; 3 * 25 * 3]).unwrap();
        for p in [[0.0, 0.0, 0.0], [0.93, -0.2, 0.41], [-1.0, 1.0, 0.5], [1.7, -3.0, 0.0]] {
            assert!(tp.query(p).unwrap().iter().all(|v| (v - 0.75).abs() < 1e-15));
        }
    }

    #[test]
    fn midpoint_of_four_texels_is_their_mean() {
        let tp = Triplane::random(6, 1, 1.0, &mut rng(2)).unwrap();
        let mid = |i: usize| 0.5 * (tp.texel_center(i) + tp.texel_center(i + 1));
        let f = tp.query([mid(1), mid(3), 0.0]).unwrap();
        let mean = (tp.texel(Plane::Xy, 1, 3)[0] + tp.texel(Plane::Xy, 2, 3)[0] + tp.texel(Plane::Xy, 1, 4)[0] + tp.texel(Plane::Xy, 2, 4)[0]) / 4.0;
        assert!((f[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn outside_queries_clamp_to_boundary() {
        let tp = Triplane::random(4, 1, 1.0, &mut rng(3)).unwrap();
        assert_eq!(tp.query([1.5, -2.0, 0.3]).unwrap(), tp.query([1.0, -1.0, 0.3]).unwrap());
        assert!(matches!(tp.query([f64::NAN, 0.0, 0.0]), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn query_backward_matches_finite_differences() {
        let tp = Triplane::random(5, 2, 1.0, &mut rng(4)).unwrap();
        let p = [0.13, -0.37, 0.52];
        let up: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).sin()).collect();
        let f = |tp: &Triplane, p: Point| tp.query(p).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
        let st = tp.stencil(p).unwrap();
        let mut tg = vec![0.0; tp.data().len()];
        let gp = tp.query_backward(&st, &up, Some(&mut tg));
        let h = 1e-6;
        for k in 0..3 {
            let (mut a, mut b) = (p, p);
            a[k] += h;
            b[k] -= h;
            let num = (f(&tp, a) - f(&tp, b)) / (2.0 * h);
            assert!((num - gp[k]).abs() < 1e-7, "axis {k}: {num} vs {}", gp[k]);
        }
        for i in 0..tg.len() {
            let mut tpp = tp.clone();
            tpp.data_mut()[i] += h;
            let mut tpm = tp.clone();
            tpm.data_mut()[i] -= h;
            let num = (f(&tpp, p) - f(&tpm, p)) / (2.0 * h);
            assert!((num - tg[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn far_texel_does_not_affect_velocity() {
        let mut r = rng(5);
        let tp = Triplane::random(8, 2, 0.1, &mut r).unwrap();
        let mut dec = VelocityDecoder::new(2, &[16, 16], Activation::Softplus, true, &mut r).unwrap();
        for v in dec.net.params_mut() {
            *v += 0.05;
        }
        let q = [-0.8, -0.8, -0.8];
        let mut other = tp.clone();
        other.texel_mut(Plane::Xy, 7, 7)[1] += 10.0;
        other.texel_mut(Plane::Yz, 6, 7)[0] -= 3.0;
        assert_eq!(dec.velocity(&tp, q, 0.3).unwrap(), dec.velocity(&other, q, 0.3).unwrap());
    }

    #[test]
    fn zero_final_layer_decoder_gives_zero_velocity() {
        let mut r = rng(6);
        let tp = Triplane::random(4, 2, 1.0, &mut r).unwrap();
        let dec = VelocityDecoder::new(2, &[8], Activation::Softplus, true, &mut r).unwrap();
        assert_eq!(velocity(&tp, &dec, [0.2, 0.1, -0.5], 0.5).unwrap(), [0.0; 3]);
    }

    #[test]
    fn velocity_texel_gradient_matches_finite_differences() {
        let mut r = rng(7);
        let tp = Triplane::random(4, 2, 0.5, &mut r).unwrap();
        let dec = VelocityDecoder::from_net(
            Mlp::new(&[10, 12, 3], Activation::Softplus, OutputActivation::Identity, &mut r).unwrap(),
            true,
        )
        .unwrap();
        let (q, t) = ([0.21, -0.43, 0.6], 0.4);
        let up = [0.3, -0.8, 1.1];
        let (_, tape) = dec.velocity_taped(&tp, q, t).unwrap();
        let mut tg = vec![0.0; tp.data().len()];
        let mut dg = vec![0.0; dec.net.num_params()];
        let gq = dec.velocity_backward(&tp, &tape, up, Some(&mut dg), Some(&mut tg)).unwrap();
        let f = |tp: &Triplane, dec: &VelocityDecoder, q: Point| {
            let v = dec.velocity(tp, q, t).unwrap();
            v[0] * up[0] + v[1] * up[1] + v[2] * up[2]
        };
        let h = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        for i in 0..tg.len() {
            let (mut a, mut b) = (tp.clone(), tp.clone());
            a.data_mut()[i] += h;
            b.data_mut()[i] -= h;
            let num = (f(&a, &dec, q) - f(&b, &dec, q)) / (2.0 * h);
            assert!(rel(num, tg[i]) < 1e-5, "texel {i}: {num} vs {}", tg[i]);
        }
        for i in 0..dg.len() {
            let (mut a, mut b) = (dec.clone(), dec.clone());
            a.net.params_mut()[i] += h;
            b.net.params_mut()[i] -= h;
            let num = (f(&tp, &a, q) - f(&tp, &b, q)) / (2.0 * h);
            assert!(rel(num, dg[i]) < 1e-5);
        }
        for k in 0..3 {
            let (mut a, mut b) = (q, q);
            a[k] += h;
            b[k] -= h;
            let num = (f(&tp, &dec, a) - f(&tp, &dec, b)) / (2.0 * h);
            assert!(rel(num, gq[k]) < 1e-5);
        }
    }

    #[test]
    fn template_zero_last_layer_is_zero_and_gradient_checks() {
        let mut r = rng(8);
        let mut t = TemplateSdf::new(&[16, 16], Activation::Softplus, &mut r).unwrap();
        let g_before = t.clone();
        t.net.zero_last_layer();
        assert_eq!(template_sdf(&t, [0.3, 0.2, 0.9]).unwrap(), 0.0);
        let t = g_before;
        let p = [0.3, -0.2, 0.5];
        let g = t.gradient(p).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let (mut a, mut b) = (p, p);
            a[k] += h;
            b[k] -= h;
            let num = (t.sdf(a).unwrap() - t.sdf(b).unwrap()) / (2.0 * h);
            assert!((num - g[k]).abs() / num.abs().max(1e-6) < 1e-5);
        }
    }

    #[test]
    fn tv_examples() {
        let flat = Triplane::from_data(3, 2, vec![1.5; 54]).unwrap();
        assert_eq!(triplane_tv(&flat), 0.0);

        // One plane, one channel, L=2: rows [[0,1],[0,1]] (i indexes rows).
        let mut tp = Triplane::zeros(2, 1).unwrap();
        tp.texel_mut(Plane::Xy, 0, 1)[0] = 1.0;
        tp.texel_mut(Plane::Xy, 1, 1)[0] = 1.0;
        assert_eq!(triplane_tv(&tp), 2.0);

        let rnd = Triplane::random(4, 2, 1.0, &mut rng(9)).unwrap();
        let mut scaled = rnd.clone();
        scaled.data_mut().iter_mut().for_each(|v| *v *= 2.5);
        assert!((triplane_tv(&scaled) - 2.5 * triplane_tv(&rnd)).abs() < 1e-12);
    }

    #[test]
    fn l2_examples() {
        assert_eq!(triplane_l2(&Triplane::zeros(3, 2).unwrap()), 0.0);
        let mut tp = Triplane::zeros(2, 1).unwrap();
        tp.plane_mut(Plane::Xy).fill(1.0);
        assert_eq!(triplane_l2(&tp), 2.0);
        let rnd = Triplane::random(4, 2, 1.0, &mut rng(10)).unwrap();
        let mut scaled = rnd.clone();
        scaled.data_mut().iter_mut().for_each(|v| *v *= 0.3);
        assert!((triplane_l2(&scaled) - 0.3 * triplane_l2(&rnd)).abs() < 1e-12);
    }

    #[test]
    fn regularizer_gradients_match_finite_differences() {
        let tp = Triplane::random(4, 2, 1.0, &mut rng(11)).unwrap();
        let mut g_tv = vec![0.0; tp.data().len()];
        let mut g_l2 = vec![0.0; tp.data().len()];
        triplane_tv_grad(&tp, 1.0, &mut g_tv);
        triplane_l2_grad(&tp, 1.0, &mut g_l2);
        let h = 1e-7;
        for i in 0..tp.data().len() {
            let (mut a, mut b) = (tp.clone(), tp.clone());
            a.data_mut()[i] += h;
            b.data_mut()[i] -= h;
            let n_tv = (triplane_tv(&a) - triplane_tv(&b)) / (2.0 * h);
            let n_l2 = (triplane_l2(&a) - triplane_l2(&b)) / (2.0 * h);
            assert!((n_tv - g_tv[i]).abs() < 1e-6, "tv {i}");
            assert!((n_l2 - g_l2[i]).abs() < 1e-6, "l2 {i}");
        }
    }

    #[test]
    fn channel_image_and_binary_round_trip() {
        let tp = Triplane::random(5, 3, 1.0, &mut rng(12)).unwrap();
        let img = tp.to_channels();
        assert_eq!(img[(3 * 5 + 2) * 5 + 4], tp.texel(Plane::Xz, 2, 4)[0]);
        assert_eq!(Triplane::from_channels(5, 3, &img).unwrap(), tp);
        let mut buf = Vec::new();
        tp.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TPLN");
        assert_eq!(Triplane::read_from(buf.as_slice()).unwrap(), tp);
        assert!(Triplane::read_from(&b"XXXX"[..]).is_err());
    }
}
