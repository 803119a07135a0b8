//! Quadric-error edge-collapse decimation.
//!
//! A collapse is accepted only if it keeps the surface a 2-manifold (the link
//! condition: the two endpoints share exactly the two opposite vertices of
//! the edge's faces), leaves boundary vertices alone, and rotates no
//! surviving face normal by more than about 78 degrees.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::field::Point;
use crate::geometry::mesh::{cross, dot, norm, sub, TriMesh};

type Quadric = [f64; 10];

fn plane_quadric(a: Point, b: Point, c: Point) -> Quadric {
    let n = cross(sub(b, a), sub(c, a));
    let l = norm(n);
    if l == 0.0 {
        return [0.0; 10];
    }
    let (x, y, z) = (n[0] / l, n[1] / l, n[2] / l);
    let d = -(x * a[0] + y * a[1] + z * a[2]);
    [x * x, x * y, x * z, x * d, y * y, y * z, y * d, z * z, z * d, d * d]
}

fn add_quadric(q: &mut Quadric, r: &Quadric) {
    for (a, b) in q.iter_mut().zip(r) {
        *a += b;
    }
}

fn quadric_error(q: &Quadric, p: Point) -> f64 {
    let [x, y, z] = p;
    q[0] * x * x + 2.0 * q[1] * x * y + 2.0 * q[2] * x * z + 2.0 * q[3] * x + q[4] * y * y + 2.0 * q[5] * y * z
        + 2.0 * q[6] * y
        + q[7] * z * z
        + 2.0 * q[8] * z
        + q[9]
}

/// Minimiser of the quadric, if its 3×3 block is well conditioned.
fn quadric_optimum(q: &Quadric) -> Option<Point> {
    let m = [[q[0], q[1], q[2]], [q[1], q[4], q[5]], [q[2], q[5], q[7]]];
    let rhs = [-q[3], -q[6], -q[8]];
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let scale = q[0] + q[4] + q[7];
    if det.abs() < 1e-6 * scale.powi(3) || scale == 0.0 {
        return None;
    }
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let mut mk = m;
        for r in 0..3 {
            mk[r][k] = rhs[r];
        }
        *o = (mk[0][0] * (mk[1][1] * mk[2][2] - mk[1][2] * mk[2][1])
            - mk[0][1] * (mk[1][0] * mk[2][2] - mk[1][2] * mk[2][0])
            + mk[0][2] * (mk[1][0] * mk[2][1] - mk[1][1] * mk[2][0]))
            / det;
    }
    Some(out)
}

#[derive(Debug, PartialEq)]
struct Candidate {
    cost: f64,
    u: usize,
    v: usize,
    stamp_u: u32,
    stamp_v: u32,
    target: Point,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        other.cost.total_cmp(&self.cost).then_with(|| (other.u, other.v).cmp(&(self.u, self.v)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct State {
    vertices: Vec<Point>,
    faces: Vec<[usize; 3]>,
    face_alive: Vec<bool>,
    vertex_faces: Vec<Vec<usize>>,
    vertex_alive: Vec<bool>,
    boundary: Vec<bool>,
    stamp: Vec<u32>,
    quadrics: Vec<Quadric>,
}

impl State {
    fn faces_of(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.vertex_faces[v].iter().copied().filter(|&f| self.face_alive[f])
    }

    fn neighbors(&self, v: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.faces_of(v).flat_map(|f| self.faces[f]).filter(|&w| w != v).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    fn candidate(&self, u: usize, v: usize) -> Candidate {
        let mut q = self.quadrics[u];
        add_quadric(&mut q, &self.quadrics[v]);
        let (a, b) = (self.vertices[u], self.vertices[v]);
        let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, (a[2] + b[2]) / 2.0];
        let edge = norm(sub(a, b));
        let mut options = vec![mid, a, b];
        if let Some(p) = quadric_optimum(&q) {
            if norm(sub(p, mid)) <= edge {
                options.push(p);
            }
        }
        let (cost, target) = options
            .into_iter()
            .map(|p| (quadric_error(&q, p).max(0.0), p))
            .min_by(|x, y| x.0.total_cmp(&y.0))
            .unwrap();
        // Tie-break flat regions toward short edges.
        let cost = cost + 1e-9 * edge * edge;
        Candidate { cost, u, v, stamp_u: self.stamp[u], stamp_v: self.stamp[v], target }
    }

    fn collapse_allowed(&self, u: usize, v: usize, target: Point) -> bool {
        if self.boundary[u] || self.boundary[v] {
            return false;
        }
        let shared: Vec<usize> = self.faces_of(u).filter(|&f| self.faces[f].contains(&v)).collect();
        if shared.len() != 2 {
            return false;
        }
        let mut opposite: Vec<usize> =
            shared.iter().flat_map(|&f| self.faces[f]).filter(|&w| w != u && w != v).collect();
        opposite.sort_unstable();
        let nu = self.neighbors(u);
        let nv = self.neighbors(v);
        let common: Vec<usize> = nu.iter().copied().filter(|w| nv.binary_search(w).is_ok()).collect();
        if common != opposite {
            return false;
        }
        for w in [u, v] {
            for f in self.faces_of(w) {
                let t = self.faces[f];
                if t.contains(&u) && t.contains(&v) {
                    continue;
                }
                let old = t.map(|x| self.vertices[x]);
                let new = t.map(|x| if x == u || x == v { target } else { self.vertices[x] });
                let n0 = cross(sub(old[1], old[0]), sub(old[2], old[0]));
                let n1 = cross(sub(new[1], new[0]), sub(new[2], new[0]));
                let (l0, l1) = (norm(n0), norm(n1));
                if l1 <= 1e-12 * l0 || dot(n0, n1) < 0.2 * l0 * l1 {
                    return false;
                }
            }
        }
        true
    }

    fn collapse(&mut self, u: usize, v: usize, target: Point) {
        self.vertices[u] = target;
        let qv = self.quadrics[v];
        add_quadric(&mut self.quadrics[u], &qv);
        let faces_v: Vec<usize> = self.faces_of(v).collect();
        for f in faces_v {
            if self.faces[f].contains(&u) {
                self.face_alive[f] = false;
            } else {
                for x in &mut self.faces[f] {
                    if *x == v {
                        *x = u;
                    }
                }
                self.vertex_faces[u].push(f);
            }
        }
        self.vertex_faces[u].retain(|&f| self.face_alive[f]);
        self.vertex_alive[v] = false;
        self.vertex_faces[v].clear();
        self.stamp[u] += 1;
    }
}

/// Collapses edges until at most `target_vertices` referenced vertices remain
/// or no collapse is allowed. Meshes already at or below the target are
/// returned compacted.
pub fn decimate(mesh: &TriMesh, target_vertices: usize) -> TriMesh {
    let mesh = mesh.compact();
    let nv = mesh.vertices.len();
    if nv <= target_vertices {
        return mesh;
    }
    let mut vertex_faces = vec![Vec::new(); nv];
    let mut quadrics = vec![[0.0; 10]; nv];
    for (f, t) in mesh.triangles.iter().enumerate() {
        let q = plane_quadric(mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]);
        for &v in t {
            vertex_faces[v].push(f);
            add_quadric(&mut quadrics[v], &q);
        }
    }
    let mut boundary = vec![false; nv];
    for (&(a, b), &count) in &mesh.edge_counts() {
        if count != 2 {
            boundary[a] = true;
            boundary[b] = true;
        }
    }
    let mut st = State {
        vertices: mesh.vertices.clone(),
        face_alive: vec![true; mesh.triangles.len()],
        faces: mesh.triangles.clone(),
        vertex_faces,
        vertex_alive: vec![true; nv],
        boundary,
        stamp: vec![0; nv],
        quadrics,
    };
    let mut heap = BinaryHeap::new();
    for (&(a, b), _) in mesh.edge_counts().iter() {
        heap.push(st.candidate(a, b));
    }
    let mut alive = nv;
    while alive > target_vertices {
        let Some(c) = heap.pop() else { break };
        if !st.vertex_alive[c.u] || !st.vertex_alive[c.v] || st.stamp[c.u] != c.stamp_u || st.stamp[c.v] != c.stamp_v {
            continue;
        }
        if !st.collapse_allowed(c.u, c.v, c.target) {
            continue;
        }
        st.collapse(c.u, c.v, c.target);
        alive -= 1;
        for w in st.neighbors(c.u) {
            heap.push(st.candidate(c.u, w));
        }
    }
    let triangles = st.faces.iter().zip(&st.face_alive).filter(|(_, &a)| a).map(|(t, _)| *t).collect();
    TriMesh { vertices: st.vertices, triangles }.compact()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::intersect::self_intersections;

    #[test]
    fn decimated_sphere_stays_closed_and_close() {
        let m = TriMesh::icosphere(4);
        let d = decimate(&m, 500);
        assert!(d.vertices.len() <= 500);
        assert!(d.vertices.len() >= 450);
        assert!(d.is_watertight());
        assert_eq!(d.euler_characteristic(), 2);
        for v in &d.vertices {
            assert!((norm(*v) - 1.0).abs() < 0.05);
        }
        assert_eq!(self_intersections(&d), 0);
        assert!((d.signed_volume() - m.signed_volume()).abs() / m.signed_volume() < 0.05);
    }

    #[test]
    fn small_meshes_pass_through() {
        let m = TriMesh::icosphere(1);
        assert_eq!(decimate(&m, 1000), m.compact());
    }

    #[test]
    fn deterministic() {
        let m = TriMesh::icosphere(3);
        assert_eq!(decimate(&m, 200), decimate(&m, 200));
    }
}
