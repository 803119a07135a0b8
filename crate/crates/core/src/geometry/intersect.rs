//! Triangle-triangle intersection and self-intersection counting.
//!
//! Two triangles intersect properly when their intersection has positive
//! length (transversal case) or positive area (coplanar case). Contacts at a
//! single point do not count.

use crate::field::Point;
use crate::geometry::mesh::{cross, dot, sub, TriMesh};

type Tri = [Point; 3];

fn plane_distances(n: Point, origin: Point, t: &Tri, eps: f64) -> [f64; 3] {
    t.map(|v| {
        let d = dot(n, sub(v, origin));
        if d.abs() <= eps {
            0.0
        } else {
            d
        }
    })
}

/// Parameter interval of `t ∩ plane` along `dir`, given signed distances of
/// the vertices to the plane (not all of one strict sign).
fn interval(t: &Tri, d: [f64; 3], dir: Point) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut push = |p: Point| {
        let s = dot(dir, p);
        lo = lo.min(s);
        hi = hi.max(s);
    };
    for k in 0..3 {
        let (a, b) = (k, (k + 1) % 3);
        if d[a] == 0.0 {
            push(t[a]);
        }
        if d[a] * d[b] < 0.0 {
            let s = d[a] / (d[a] - d[b]);
            push([
                t[a][0] + s * (t[b][0] - t[a][0]),
                t[a][1] + s * (t[b][1] - t[a][1]),
                t[a][2] + s * (t[b][2] - t[a][2]),
            ]);
        }
    }
    (lo, hi)
}

fn scale_of(a: &Tri, b: &Tri) -> f64 {
    a.iter().chain(b).flat_map(|p| p.iter()).fold(0.0f64, |m, v| m.max(v.abs())).max(1.0)
}

/// True when the triangles share a segment of positive length or, if
/// coplanar, an overlap of positive area.
pub fn triangles_intersect(a: &Tri, b: &Tri) -> bool {
    let scale = scale_of(a, b);
    let na = cross(sub(a[1], a[0]), sub(a[2], a[0]));
    let nb = cross(sub(b[1], b[0]), sub(b[2], b[0]));
    let (la, lb) = (dot(na, na).sqrt(), dot(nb, nb).sqrt());
    if la == 0.0 || lb == 0.0 {
        return false;
    }
    let eps = 1e-12 * scale;
    let na = na.map(|v| v / la);
    let nb = nb.map(|v| v / lb);
    let db = plane_distances(na, a[0], b, eps);
    if db.iter().all(|&d| d > 0.0) || db.iter().all(|&d| d < 0.0) {
        return false;
    }
    if db.iter().all(|&d| d == 0.0) {
        return coplanar_overlap(a, b, na);
    }
    let da = plane_distances(nb, b[0], a, eps);
    if da.iter().all(|&d| d > 0.0) || da.iter().all(|&d| d < 0.0) {
        return false;
    }
    if da.iter().all(|&d| d == 0.0) {
        return coplanar_overlap(a, b, na);
    }
    let dir = cross(na, nb);
    if dot(dir, dir) < 1e-24 {
        return coplanar_overlap(a, b, na);
    }
    let (a0, a1) = interval(a, da, dir);
    let (b0, b1) = interval(b, db, dir);
    a0.max(b0) < a1.min(b1) - eps
}

/// Positive-area overlap of two coplanar triangles by the separating axis
/// test with strict inequalities.
fn coplanar_overlap(a: &Tri, b: &Tri, n: Point) -> bool {
    let drop = (0..3).max_by(|&i, &j| n[i].abs().total_cmp(&n[j].abs())).unwrap();
    let (u, v) = match drop {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let pa: Vec<[f64; 2]> = a.iter().map(|p| [p[u], p[v]]).collect();
    let pb: Vec<[f64; 2]> = b.iter().map(|p| [p[u], p[v]]).collect();
    let eps = 1e-12 * scale_of(a, b);
    for poly in [&pa, &pb] {
        for k in 0..3 {
            let e = [poly[(k + 1) % 3][0] - poly[k][0], poly[(k + 1) % 3][1] - poly[k][1]];
            let axis = [-e[1], e[0]];
            let proj = |ps: &[[f64; 2]]| {
                ps.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                    let s = axis[0] * p[0] + axis[1] * p[1];
                    (lo.min(s), hi.max(s))
                })
            };
            let (a0, a1) = proj(&pa);
            let (b0, b1) = proj(&pb);
            let len = axis[0].hypot(axis[1]);
            if a0.max(b0) >= a1.min(b1) - eps * len {
                return false;
            }
        }
    }
    true
}

fn share_vertex(a: &[usize; 3], b: &[usize; 3]) -> bool {
    a.iter().any(|v| b.contains(v))
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: Point,
    hi: Point,
}

impl Aabb {
    fn of(t: &Tri) -> Self {
        let mut lo = t[0];
        let mut hi = t[0];
        for p in &t[1..] {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        Self { lo, hi }
    }

    fn union(self, o: Self) -> Self {
        let mut r = self;
        for k in 0..3 {
            r.lo[k] = r.lo[k].min(o.lo[k]);
            r.hi[k] = r.hi[k].max(o.hi[k]);
        }
        r
    }

    fn overlaps(&self, o: &Self) -> bool {
        (0..3).all(|k| self.lo[k] <= o.hi[k] && o.lo[k] <= self.hi[k])
    }
}

struct Bvh {
    nodes: Vec<BvhNode>,
    order: Vec<usize>,
}

struct BvhNode {
    bounds: Aabb,
    start: usize,
    end: usize,
    children: Option<(usize, usize)>,
}

impl Bvh {
    fn new(boxes: &[Aabb]) -> Self {
        let mut bvh = Self { nodes: Vec::new(), order: (0..boxes.len()).collect() };
        if !boxes.is_empty() {
            bvh.build(boxes, 0, boxes.len());
        }
        bvh
    }

    fn build(&mut self, boxes: &[Aabb], start: usize, end: usize) -> usize {
        let bounds = self.order[start..end].iter().map(|&i| boxes[i]).reduce(Aabb::union).unwrap();
        let id = self.nodes.len();
        self.nodes.push(BvhNode { bounds, start, end, children: None });
        if end - start <= 4 {
            return id;
        }
        let centre = |b: &Aabb, k: usize| b.lo[k] + b.hi[k];
        let axis = (0..3).max_by(|&a, &b| (bounds.hi[a] - bounds.lo[a]).total_cmp(&(bounds.hi[b] - bounds.lo[b]))).unwrap();
        let mid = (start + end) / 2;
        self.order[start..end]
            .select_nth_unstable_by(mid - start, |&a, &b| centre(&boxes[a], axis).total_cmp(&centre(&boxes[b], axis)));
        let left = self.build(boxes, start, mid);
        let right = self.build(boxes, mid, end);
        self.nodes[id].children = Some((left, right));
        id
    }

    fn query(&self, q: &Aabb, out: &mut Vec<usize>) {
        if self.nodes.is_empty() {
            return;
        }
        let mut stack = vec![0];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if !node.bounds.overlaps(q) {
                continue;
            }
            match node.children {
                Some((l, r)) => {
                    stack.push(l);
                    stack.push(r);
                }
                None => out.extend_from_slice(&self.order[node.start..node.end]),
            }
        }
    }
}

/// Number of properly intersecting triangle pairs that share no vertex.
pub fn self_intersections(mesh: &TriMesh) -> usize {
    let tris: Vec<Tri> = (0..mesh.triangles.len()).map(|f| mesh.corners(f)).collect();
    let boxes: Vec<Aabb> = tris.iter().map(Aabb::of).collect();
    let bvh = Bvh::new(&boxes);
    let mut count = 0;
    let mut candidates = Vec::new();
    for i in 0..tris.len() {
        candidates.clear();
        bvh.query(&boxes[i], &mut candidates);
        for &j in &candidates {
            if j > i && !share_vertex(&mesh.triangles[i], &mesh.triangles[j]) && triangles_intersect(&tris[i], &tris[j]) {
                count += 1;
            }
        }
    }
    count
}

/// All-pairs reference for [`self_intersections`].
pub fn self_intersections_brute_force(mesh: &TriMesh) -> usize {
    let n = mesh.triangles.len();
    let mut count = 0;
    for i in 0..n {
        for j in i + 1..n {
            if !share_vertex(&mesh.triangles[i], &mesh.triangles[j])
                && triangles_intersect(&mesh.corners(i), &mesh.corners(j))
            {
                count += 1;
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transversal_touching_and_coplanar_cases() {
        let a = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let piercing = [[0.2, 0.2, -1.0], [0.2, 0.2, 1.0], [0.3, 0.3, 1.0]];
        assert!(triangles_intersect(&a, &piercing));
        let above = [[0.2, 0.2, 0.1], [0.2, 0.2, 1.0], [0.3, 0.3, 1.0]];
        assert!(!triangles_intersect(&a, &above));
        // Touching at a single vertex in the plane.
        let touching = [[0.2, 0.2, 0.0], [0.2, 0.2, 1.0], [0.3, 0.4, 1.0]];
        assert!(!triangles_intersect(&a, &touching));
        let overlap = [[0.1, 0.1, 0.0], [2.0, 0.1, 0.0], [0.1, 2.0, 0.0]];
        assert!(triangles_intersect(&a, &overlap));
        let edge_contact = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]];
        assert!(!triangles_intersect(&a, &edge_contact));
        let apart = [[2.0, 2.0, 0.0], [3.0, 2.0, 0.0], [2.0, 3.0, 0.0]];
        assert!(!triangles_intersect(&a, &apart));
    }

    #[test]
    fn convex_meshes_have_none() {
        assert_eq!(self_intersections(&TriMesh::icosphere(3)), 0);
        assert_eq!(self_intersections(&TriMesh::tetrahedron()), 0);
    }

    #[test]
    fn interpenetrating_tetrahedra() {
        let a = TriMesh::tetrahedron();
        let mut b = TriMesh::tetrahedron();
        for v in &mut b.vertices {
            v[0] += 0.4;
            v[1] += 0.1;
        }
        let m = a.merged(&b);
        let brute = self_intersections_brute_force(&m);
        assert!(brute > 0);
        assert_eq!(self_intersections(&m), brute);
    }

    #[test]
    fn accelerated_count_matches_brute_force_on_perturbed_meshes() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut total = 0;
        for _ in 0..20 {
            let mut m = TriMesh::icosphere(2);
            for v in &mut m.vertices {
                for c in v.iter_mut() {
                    *c += rng.random_range(-0.25..0.25);
                }
            }
            let brute = self_intersections_brute_force(&m);
            total += brute;
            assert_eq!(self_intersections(&m), brute);
        }
        assert!(total > 0);
    }
}
