//! Marching cubes with a case table generated at first use.
//!
//! For each of the 256 inside/outside corner patterns the surface's trace on
//! every cube face is a set of segments joining sign-changing edges. A face
//! with four sign changes (diagonal inside corners) is resolved by cutting
//! off each inside corner separately. That rule only looks at the face's own
//! corners, so the two cubes sharing a face always agree and the mesh is
//! watertight. Segments chain into closed loops, each loop is fanned into
//! triangles and oriented so normals point from inside corners to outside
//! ones.

use std::sync::OnceLock;

use crate::field::Point;
use crate::geometry::grid::SdfGrid;
use crate::geometry::mesh::TriMesh;

/// Corner `c` sits at offset `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
fn corner_offset(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// The 12 cube edges as `(lower corner, axis)`.
fn edges() -> [(usize, usize); 12] {
    let mut out = [(0, 0); 12];
    let mut n = 0;
    for axis in 0..3 {
        for c in 0..8 {
            if c & (1 << axis) == 0 {
                out[n] = (c, axis);
                n += 1;
            }
        }
    }
    out
}

fn edge_between(a: usize, b: usize) -> usize {
    let (lo, hi) = (a.min(b), a.max(b));
    let axis = (hi ^ lo).trailing_zeros() as usize;
    edges().iter().position(|&e| e == (lo, axis)).expect("corners share an edge")
}

struct Table {
    /// Per case, triangles as triples of local edge indices.
    triangles: Vec<Vec<[u8; 3]>>,
}

fn table() -> &'static Table {
    static TABLE: OnceLock<Table> = OnceLock::new();
    TABLE.get_or_init(build_table)
}

/// Oriented boundary loops of the surface patch in one cube configuration.
fn case_loops(case: usize) -> Vec<Vec<usize>> {
    let inside = |c: usize| case & (1 << c) != 0;
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); 12];
    for axis in 0..3 {
        let (b, c) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for side in 0..2 {
            let ring: Vec<usize> = [(0, 0), (1, 0), (1, 1), (0, 1)]
                .iter()
                .map(|&(u, v)| (side << axis) | (u << b) | (v << c))
                .collect();
            let face_edges: Vec<usize> = (0..4).map(|k| edge_between(ring[k], ring[(k + 1) % 4])).collect();
            let crossing: Vec<usize> =
                (0..4).filter(|&k| inside(ring[k]) != inside(ring[(k + 1) % 4])).map(|k| face_edges[k]).collect();
            let mut link = |x: usize, y: usize| {
                adjacency[x].push(y);
                adjacency[y].push(x);
            };
            match crossing.len() {
                0 => {}
                2 => link(crossing[0], crossing[1]),
                _ => {
                    // Diagonal inside corners: isolate each one.
                    for k in 0..4 {
                        if inside(ring[k]) {
                            link(face_edges[(k + 3) % 4], face_edges[k]);
                        }
                    }
                }
            }
        }
    }

    let all = edges();
    let midpoint = |e: usize| {
        let (c, axis) = all[e];
        let o = corner_offset(c);
        let mut p = [o[0] as f64, o[1] as f64, o[2] as f64];
        p[axis] += 0.5;
        p
    };
    let mut visited = [false; 12];
    let mut loops = Vec::new();
    for start in 0..12 {
        if visited[start] || adjacency[start].is_empty() {
            continue;
        }
        let mut lp = vec![start];
        visited[start] = true;
        let (mut prev, mut cur) = (start, adjacency[start][0]);
        while cur != start {
            visited[cur] = true;
            lp.push(cur);
            let next = if adjacency[cur][0] == prev { adjacency[cur][1] } else { adjacency[cur][0] };
            prev = cur;
            cur = next;
        }
        // Orient by the Newell normal against the inside → outside direction.
        let mut normal = [0.0; 3];
        let mut outward = [0.0; 3];
        for (k, &e) in lp.iter().enumerate() {
            let (p, q) = (midpoint(e), midpoint(lp[(k + 1) % lp.len()]));
            normal[0] += (p[1] - q[1]) * (p[2] + q[2]);
            normal[1] += (p[2] - q[2]) * (p[0] + q[0]);
            normal[2] += (p[0] - q[0]) * (p[1] + q[1]);
            let (c, axis) = all[e];
            let dir = if inside(c) { 1.0 } else { -1.0 };
            outward[axis] += dir;
        }
        let d: f64 = (0..3).map(|k| normal[k] * outward[k]).sum();
        debug_assert!(d.abs() > 1e-9);
        if d < 0.0 {
            lp.reverse();
        }
        loops.push(lp);
    }
    loops
}

fn build_table() -> Table {
    let triangles = (0..256)
        .map(|case| {
            case_loops(case)
                .iter()
                .flat_map(|lp| (1..lp.len() - 1).map(move |k| [lp[0] as u8, lp[k] as u8, lp[k + 1] as u8]))
                .collect()
        })
        .collect();
    Table { triangles }
}

/// Extracts the `iso` level set; points with value below `iso` are inside.
/// Vertices are shared between neighbouring cubes, and an all-one-sign grid
/// gives an empty mesh.
pub fn marching_cubes(grid: &SdfGrid, iso: f64) -> TriMesh {
    let n = grid.n();
    let h = grid.spacing();
    let table = table();
    let all = edges();
    let mut vertex_of = vec![u32::MAX; n * n * n * 3];
    let mut vertices: Vec<Point> = Vec::new();
    let mut triangles = Vec::new();
    for i in 0..n - 1 {
        for j in 0..n - 1 {
            for k in 0..n - 1 {
                let mut case = 0usize;
                let mut vals = [0.0; 8];
                for (c, val) in vals.iter_mut().enumerate() {
                    let o = corner_offset(c);
                    *val = grid.get(i + o[0], j + o[1], k + o[2]);
                    if *val < iso {
                        case |= 1 << c;
                    }
                }
                let tris = &table.triangles[case];
                if tris.is_empty() {
                    continue;
                }
                let mut local = [u32::MAX; 12];
                for tri in tris {
                    let mut out = [0usize; 3];
                    for (slot, &e) in out.iter_mut().zip(tri) {
                        let e = e as usize;
                        if local[e] == u32::MAX {
                            let (c, axis) = all[e];
                            let o = corner_offset(c);
                            let g = [i + o[0], j + o[1], k + o[2]];
                            let key = ((g[0] * n + g[1]) * n + g[2]) * 3 + axis;
                            if vertex_of[key] == u32::MAX {
                                let v0 = vals[c];
                                let v1 = vals[c | (1 << axis)];
                                let t = ((iso - v0) / (v1 - v0)).clamp(1e-6, 1.0 - 1e-6);
                                let mut p = [-1.0 + g[0] as f64 * h, -1.0 + g[1] as f64 * h, -1.0 + g[2] as f64 * h];
                                p[axis] += t * h;
                                vertex_of[key] = vertices.len() as u32;
                                vertices.push(p);
                            }
                            local[e] = vertex_of[key];
                        }
                        *slot = local[e] as usize;
                    }
                    triangles.push(out);
                }
            }
        }
    }
    TriMesh { vertices, triangles }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::grid::eval_sdf_grid;
    use crate::geometry::AnalyticShape;

    #[test]
    fn every_case_uses_each_crossing_edge() {
        for case in 1..255usize {
            let tris = &table().triangles[case];
            assert!(!tris.is_empty(), "case {case}");
            let crossings = edges()
                .iter()
                .filter(|&&(c, a)| (case >> c) & 1 != (case >> (c | (1 << a))) & 1)
                .count();
            let verts: std::collections::BTreeSet<u8> = tris.iter().flatten().copied().collect();
            assert_eq!(verts.len(), crossings, "case {case}");
        }
        assert!(table().triangles[0].is_empty() && table().triangles[255].is_empty());
    }

    #[test]
    fn every_loop_has_at_least_three_edges() {
        for case in 0..256usize {
            assert!(case_loops(case).iter().all(|l| l.len() >= 3), "case {case}");
        }
    }

    #[test]
    fn one_sign_grid_gives_empty_mesh() {
        let g = eval_sdf_grid(|_| Ok(1.0), 5).unwrap();
        assert!(marching_cubes(&g, 0.0).is_empty());
    }

    #[test]
    fn sphere_extraction_is_accurate_watertight_and_outward() {
        let s = AnalyticShape::sphere(0.8);
        let g = eval_sdf_grid(|p| Ok(s.sdf(p)), 64).unwrap();
        let h = g.spacing();
        let m = marching_cubes(&g, 0.0);
        for v in &m.vertices {
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!((r - 0.8).abs() <= 2.0 * h);
        }
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 2);
        assert!(m.signed_volume() > 0.0);
        assert!((0..m.triangles.len()).all(|f| m.triangle_area(f) > 0.0));
    }

    #[test]
    fn random_fields_give_watertight_meshes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            // Boundary forced positive so the surface never touches it.
            let n = 8;
            let values: Vec<f64> = (0..n * n * n)
                .map(|idx| {
                    let (i, j, k) = (idx / (n * n), (idx / n) % n, idx % n);
                    if [i, j, k].iter().any(|&x| x == 0 || x == n - 1) {
                        1.0
                    } else {
                        rng.random_range(-1.0..1.0)
                    }
                })
                .collect();
            let m = marching_cubes(&SdfGrid::new(n, values).unwrap(), 0.0);
            assert!(m.is_watertight());
        }
    }
}
