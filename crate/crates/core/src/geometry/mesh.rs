use std::collections::HashMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};
use crate::field::Point;

/// An indexed triangle mesh. Triangles are counter-clockwise seen from the
/// side their normal points to.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriMesh {
    pub vertices: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
}

#[inline]
pub(crate) fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn cross(a: Point, b: Point) -> Point {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
pub(crate) fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn norm(a: Point) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub(crate) fn dist2(a: Point, b: Point) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

impl TriMesh {
    pub fn new(vertices: Vec<Point>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (f, t) in triangles.iter().enumerate() {
            if let Some(&bad) = t.iter().find(|&&i| i >= n) {
                return Err(Error::Format(format!("triangle {f} references vertex {bad} of {n}")));
            }
        }
        if let Some(index) = vertices.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { context: "mesh vertices", index });
        }
        Ok(Self { vertices, triangles })
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn corners(&self, f: usize) -> [Point; 3] {
        let t = self.triangles[f];
        [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]]
    }

    /// Unnormalized normal; its length is twice the triangle area.
    pub fn face_cross(&self, f: usize) -> Point {
        let [a, b, c] = self.corners(f);
        cross(sub(b, a), sub(c, a))
    }

    pub fn triangle_area(&self, f: usize) -> f64 {
        0.5 * norm(self.face_cross(f))
    }

    pub fn face_normal(&self, f: usize) -> Point {
        let n = self.face_cross(f);
        let l = norm(n);
        if l > 0.0 {
            [n[0] / l, n[1] / l, n[2] / l]
        } else {
            [0.0; 3]
        }
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|f| self.triangle_area(f)).sum()
    }

    /// Enclosed volume by the divergence theorem; positive for outward normals.
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|f| {
                let [a, b, c] = self.corners(f);
                dot(a, cross(b, c)) / 6.0
            })
            .sum()
    }

    /// Area-weighted vertex normals.
    pub fn vertex_normals(&self) -> Vec<Point> {
        let mut acc = vec![[0.0; 3]; self.vertices.len()];
        for (f, t) in self.triangles.iter().enumerate() {
            let n = self.face_cross(f);
            for &v in t {
                for c in 0..3 {
                    acc[v][c] += n[c];
                }
            }
        }
        for n in &mut acc {
            let l = norm(*n);
            if l > 0.0 {
                *n = [n[0] / l, n[1] / l, n[2] / l];
            }
        }
        acc
    }

    /// Undirected edge → number of incident triangles.
    pub fn edge_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut counts = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Every edge shared by exactly two triangles that traverse it in
    /// opposite directions.
    pub fn is_watertight(&self) -> bool {
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                *directed.entry((t[k], t[(k + 1) % 3])).or_insert(0) += 1;
            }
        }
        directed.iter().all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }

    /// `V - E + F` over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &v in t {
                used[v] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_counts().len() as i64 + self.triangles.len() as i64
    }

    pub fn flipped(&self) -> Self {
        Self {
            vertices: self.vertices.clone(),
            triangles: self.triangles.iter().map(|t| [t[0], t[2], t[1]]).collect(),
        }
    }

    /// Vertex 1-rings, sorted and deduplicated.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![Vec::new(); self.vertices.len()];
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                nb[a].push(b);
                nb[b].push(a);
            }
        }
        for n in &mut nb {
            n.sort_unstable();
            n.dedup();
        }
        nb
    }

    pub fn centroid(&self) -> Point {
        let n = self.vertices.len().max(1) as f64;
        let mut c = [0.0; 3];
        for v in &self.vertices {
            for k in 0..3 {
                c[k] += v[k] / n;
            }
        }
        c
    }

    /// Area-uniform surface samples with the normal of the face each came from.
    pub fn sample_surface<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<(Point, Point)>> {
        let areas: Vec<f64> = (0..self.triangles.len()).map(|f| self.triangle_area(f)).collect();
        let dist = WeightedIndex::new(&areas).map_err(|e| Error::Metric(format!("cannot sample mesh surface: {e}")))?;
        let normals: Vec<Point> = (0..self.triangles.len()).map(|f| self.face_normal(f)).collect();
        Ok((0..n)
            .map(|_| {
                let f = dist.sample(rng);
                let [a, b, c] = self.corners(f);
                let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                let p = [
                    a[0] + u * (b[0] - a[0]) + v * (c[0] - a[0]),
                    a[1] + u * (b[1] - a[1]) + v * (c[1] - a[1]),
                    a[2] + u * (b[2] - a[2]) + v * (c[2] - a[2]),
                ];
                (p, normals[f])
            })
            .collect())
    }

    /// Drops vertices no triangle references, renumbering the rest.
    pub fn compact(&self) -> Self {
        let mut map = vec![usize::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        let triangles = self
            .triangles
            .iter()
            .map(|t| {
                t.map(|v| {
                    if map[v] == usize::MAX {
                        map[v] = vertices.len();
                        vertices.push(self.vertices[v]);
                    }
                    map[v]
                })
            })
            .collect();
        Self { vertices, triangles }
    }

    /// Regular tetrahedron inscribed in the unit sphere, outward oriented.
    pub fn tetrahedron() -> Self {
        let s = 1.0 / 3f64.sqrt();
        Self {
            vertices: vec![[s, s, s], [s, -s, -s], [-s, s, -s], [-s, -s, s]],
            triangles: vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]],
        }
    }

    /// Unit icosphere after `subdivisions` rounds of 4-to-1 splitting.
    pub fn icosphere(subdivisions: usize) -> Self {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut vertices: Vec<Point> = [
            [-1.0, t, 0.0],
            [1.0, t, 0.0],
            [-1.0, -t, 0.0],
            [1.0, -t, 0.0],
            [0.0, -1.0, t],
            [0.0, 1.0, t],
            [0.0, -1.0, -t],
            [0.0, 1.0, -t],
            [t, 0.0, -1.0],
            [t, 0.0, 1.0],
            [-t, 0.0, -1.0],
            [-t, 0.0, 1.0],
        ]
        .iter()
        .map(|&p| normalize(p))
        .collect();
        let mut triangles = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
            let mut next = Vec::with_capacity(triangles.len() * 4);
            for t in &triangles {
                let mut m = [0; 3];
                for k in 0..3 {
                    let (a, b) = (t[k], t[(k + 1) % 3]);
                    m[k] = *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                        let (pa, pb) = (vertices[a], vertices[b]);
                        vertices.push(normalize([pa[0] + pb[0], pa[1] + pb[1], pa[2] + pb[2]]));
                        vertices.len() - 1
                    });
                }
                next.push([t[0], m[0], m[2]]);
                next.push([t[1], m[1], m[0]]);
                next.push([t[2], m[2], m[1]]);
                next.push(m);
            }
            triangles = next;
        }
        Self { vertices, triangles }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| [v[0] * s, v[1] * s, v[2] * s]).collect(),
            triangles: self.triangles.clone(),
        }
    }

    /// Disjoint union of two meshes.
    pub fn merged(&self, other: &TriMesh) -> Self {
        let off = self.vertices.len();
        let mut out = self.clone();
        out.vertices.extend_from_slice(&other.vertices);
        out.triangles.extend(other.triangles.iter().map(|t| [t[0] + off, t[1] + off, t[2] + off]));
        out
    }
}

fn normalize(p: Point) -> Point {
    let l = norm(p);
    [p[0] / l, p[1] / l, p[2] / l]
}

/// `iters` Jacobi rounds of `v ← v + λ (mean(1-ring) − v)` with uniform
/// weights. Connectivity is untouched; isolated vertices stay put.
pub fn laplacian_smooth(mesh: &TriMesh, iters: usize, lambda: f64) -> Result<TriMesh> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("smoothing factor must lie in [0, 1], got {lambda}")));
    }
    let nb = mesh.neighbors();
    let mut v = mesh.vertices.clone();
    for _ in 0..iters {
        let prev = v.clone();
        for (i, ring) in nb.iter().enumerate() {
            if ring.is_empty() {
                continue;
            }
            let inv = 1.0 / ring.len() as f64;
            let mut mean = [0.0; 3];
            for &j in ring {
                for c in 0..3 {
                    mean[c] += prev[j][c] * inv;
                }
            }
            for c in 0..3 {
                v[i][c] = prev[i][c] + lambda * (mean[c] - prev[i][c]);
            }
        }
    }
    Ok(TriMesh { vertices: v, triangles: mesh.triangles.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn icosphere_is_closed_genus_zero_and_outward() {
        let m = TriMesh::icosphere(3);
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 2);
        assert!(m.signed_volume() > 0.0);
        let c = m.corners(0);
        let n = m.face_normal(0);
        assert!(dot(n, c[0]) > 0.0);
        let ball = 4.0 / 3.0 * std::f64::consts::PI;
        // Inscribed polyhedron: slightly below the ball volume.
        assert!(m.signed_volume() < ball && m.signed_volume() > 0.97 * ball);
        assert!(m.flipped().signed_volume() < 0.0);
    }

    #[test]
    fn tetrahedron_is_outward() {
        let t = TriMesh::tetrahedron();
        assert!(t.is_watertight());
        assert!(t.signed_volume() > 0.0);
    }

    #[test]
    fn smoothing_identity_and_tetrahedron_step() {
        let t = TriMesh::tetrahedron();
        assert_eq!(laplacian_smooth(&t, 5, 0.0).unwrap(), t);
        let s = laplacian_smooth(&t, 1, 1.0).unwrap();
        assert_eq!(s.triangles, t.triangles);
        for i in 0..4 {
            for c in 0..3 {
                let others: f64 = (0..4).filter(|&j| j != i).map(|j| t.vertices[j][c]).sum::<f64>() / 3.0;
                assert!((s.vertices[i][c] - others).abs() < 1e-15);
            }
        }
        assert!(s.signed_volume().abs() < t.signed_volume());
        assert!(laplacian_smooth(&t, 1, 1.5).is_err());
    }

    #[test]
    fn symmetric_ring_centre_is_a_fixed_point() {
        let mut vertices = vec![[0.0, 0.0, 0.0]];
        let mut triangles = Vec::new();
        for k in 0..6 {
            let a = k as f64 * std::f64::consts::PI / 3.0;
            vertices.push([a.cos(), a.sin(), 0.0]);
            triangles.push([0, 1 + k, 1 + (k + 1) % 6]);
        }
        let m = TriMesh::new(vertices, triangles).unwrap();
        let s = laplacian_smooth(&m, 1, 1.0).unwrap();
        assert!(norm(s.vertices[0]) < 1e-15);
    }

    #[test]
    fn surface_samples_lie_on_the_mesh() {
        let m = TriMesh::icosphere(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (p, n) in m.sample_surface(500, &mut rng).unwrap() {
            assert!(norm(p) <= 1.0 + 1e-12 && norm(p) > 0.9);
            assert!(dot(n, p) > 0.9);
        }
        assert!(TriMesh::default().sample_surface(1, &mut rng).is_err());
    }

    #[test]
    fn out_of_range_indices_are_rejected() {
        assert!(TriMesh::new(vec![[0.0; 3]; 2], vec![[0, 1, 2]]).is_err());
    }
}
