//! Invariants that must hold for arbitrary inputs.

use std::path::Path;

use diffeoshape::diffusion::{make_schedule, p_sample_step, q_sample, NoisePredictor, ScheduleKind, TriplaneStats};
use diffeoshape::evalgen::{frechet_distance, precision_recall, GaussianStats};
use diffeoshape::field::{triplane_l2, triplane_tv, Point, Triplane};
use diffeoshape::flow::{integrate, jacobian_grid, loss_def, loss_jdet, DeformationGrid, FlowConfig, LinearField, ZeroField};
use diffeoshape::geometry::obj::{parse_obj, write_obj};
use diffeoshape::geometry::{chamfer, self_intersections, self_intersections_brute_force, TriMesh};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn point() -> impl Strategy<Value = Point> {
    [-0.9..0.9f64, -0.9..0.9f64, -0.9..0.9f64]
}

fn small_matrix(scale: f64) -> impl Strategy<Value = [[f64; 3]; 3]> {
    prop::array::uniform3(prop::array::uniform3(-scale..scale))
}

fn triplane(res: usize, channels: usize) -> impl Strategy<Value = Triplane> {
    prop::collection::vec(-2.0..2.0f64, 3 * res * res * channels).prop_map(move |d| Triplane::from_data(res, channels, d).unwrap())
}

/// Mean and covariance `B Bᵀ + 0.1 I` of dimension `d`.
fn gaussian(d: usize) -> impl Strategy<Value = GaussianStats> {
    (prop::collection::vec(-3.0..3.0f64, d), prop::collection::vec(-1.0..1.0f64, d * d)).prop_map(move |(m, b)| {
        let b = DMatrix::from_vec(d, d, b);
        GaussianStats { mean: DVector::from_vec(m), cov: &b * b.transpose() + DMatrix::identity(d, d) * 0.1 }
    })
}

/// An orthogonal matrix from the QR factor of a random square matrix.
fn orthogonal(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, d * d)
        .prop_filter("well conditioned", move |v| DMatrix::from_vec(d, d, v.clone()).determinant().abs() > 1e-2)
        .prop_map(move |v| DMatrix::from_vec(d, d, v).qr().q())
}

fn cloud(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0..5.0f64, d), n)
}

fn soup(tris: usize) -> impl Strategy<Value = TriMesh> {
    prop::collection::vec(point(), 3 * tris).prop_map(move |v| TriMesh::new(v, (0..tris).map(|i| [3 * i, 3 * i + 1, 3 * i + 2]).collect()).unwrap())
}

struct Oracle {
    x0: Vec<f64>,
    alpha_bar: f64,
}

impl NoisePredictor for Oracle {
    fn predict_noise(&self, x: &[f64], _t: usize) -> diffeoshape::Result<Vec<f64>> {
        Ok(x.iter().zip(&self.x0).map(|(xt, x0)| (xt - self.alpha_bar.sqrt() * x0) / (1.0 - self.alpha_bar).sqrt()).collect())
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frechet_is_symmetric_nonnegative_and_zero_on_the_diagonal(g in gaussian(4), r in gaussian(4)) {
        let gr = frechet_distance(&g, &r).unwrap();
        let rg = frechet_distance(&r, &g).unwrap();
        prop_assert!((gr - rg).abs() <= 1e-8 * (1.0 + gr.abs()));
        prop_assert!(gr >= -1e-9);
        prop_assert!(frechet_distance(&g, &g).unwrap().abs() < 1e-8);
    }

    #[test]
    fn frechet_is_invariant_under_rotation_and_translation(g in gaussian(3), r in gaussian(3), q in orthogonal(3), shift in prop::collection::vec(-2.0..2.0f64, 3)) {
        let s = DVector::from_vec(shift);
        let move_ = |x: &GaussianStats| GaussianStats { mean: &q * &x.mean + &s, cov: &q * &x.cov * q.transpose() };
        let a = frechet_distance(&g, &r).unwrap();
        let b = frechet_distance(&move_(&g), &move_(&r)).unwrap();
        prop_assert!((a - b).abs() <= 1e-7 * (1.0 + a.abs()));
    }

    #[test]
    fn precision_and_recall_are_fractions_and_self_coverage_is_full(g in cloud(8, 3), r in cloud(6, 3), k in 1usize..4) {
        let (p, rc) = precision_recall(&g, &r, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&rc));
        prop_assert_eq!(precision_recall(&r, &r, k).unwrap(), (1.0, 1.0));
        // Swapping the sets swaps the two numbers.
        let (p2, r2) = precision_recall(&r, &g, k).unwrap();
        prop_assert_eq!((p2, r2), (rc, p));
    }

    #[test]
    fn channel_image_round_trips(tp in triplane(4, 3)) {
        let image = tp.to_channels();
        prop_assert_eq!(image.len(), 9 * 16);
        prop_assert_eq!(Triplane::from_channels(4, 3, &image).unwrap(), tp);
    }

    #[test]
    fn regularizers_are_nonnegative_and_absolutely_homogeneous(tp in triplane(3, 2), s in -3.0..3.0f64) {
        let mut scaled = tp.clone();
        scaled.data_mut().iter_mut().for_each(|v| *v *= s);
        for f in [triplane_tv as fn(&Triplane) -> f64, triplane_l2] {
            prop_assert!(f(&tp) >= 0.0);
            prop_assert!((f(&scaled) - s.abs() * f(&tp)).abs() <= 1e-10 * (1.0 + f(&tp)));
        }
    }

    #[test]
    fn linear_flow_inverts(a in small_matrix(0.3), p in point()) {
        let field = LinearField { matrix: a };
        let q = integrate(&field, p, &FlowConfig::forward(16)).unwrap();
        let back = integrate(&field, q, &FlowConfig::inverse(16)).unwrap();
        for i in 0..3 {
            prop_assert!((back[i] - p[i]).abs() < 1e-8);
        }
        prop_assert_eq!(integrate(&ZeroField, p, &FlowConfig::forward(4)).unwrap(), p);
    }

    #[test]
    fn affine_maps_have_constant_exact_jacobians(m in small_matrix(0.4), t in point()) {
        // I + M with ‖M‖ small is orientation preserving; central differences
        // are exact for affine maps.
        let a = [[1.0 + m[0][0], m[0][1], m[0][2]], [m[1][0], 1.0 + m[1][1], m[1][2]], [m[2][0], m[2][1], 1.0 + m[2][2]]];
        let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
        let map = |p: Point| [0, 1, 2].map(|i| a[i][0] * p[0] + a[i][1] * p[1] + a[i][2] * p[2] + t[i]);
        let dg = DeformationGrid::from_map(6, map).unwrap();
        let jf = jacobian_grid(&dg).unwrap();
        for d in &jf.determinants {
            prop_assert!((d - det).abs() < 1e-9);
        }
        let fro: f64 = m.iter().flatten().map(|v| v * v).sum();
        prop_assert!((loss_def(&dg) - jf.determinants.len() as f64 * fro).abs() < 1e-8 * (1.0 + fro));
        prop_assert!((loss_jdet(&jf) - (-det).max(0.0)).abs() < 1e-9);
    }

    #[test]
    fn one_step_ancestral_sampling_with_the_true_noise_recovers_x0(x0 in prop::collection::vec(-3.0..3.0f64, 8), eps in prop::collection::vec(-3.0..3.0f64, 8), z in prop::collection::vec(-3.0..3.0f64, 8), b0 in 1e-4..0.05f64) {
        let sched = make_schedule(10, b0, 0.1, ScheduleKind::Linear).unwrap();
        let x1 = q_sample(&x0, 1, &eps, &sched).unwrap();
        let oracle = Oracle { x0: x0.clone(), alpha_bar: sched.alpha_bar[0] };
        let rec = p_sample_step(&oracle, &x1, 1, &sched, &z).unwrap();
        for (a, b) in rec.iter().zip(&x0) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn schedules_are_monotone_and_bounded(steps in 1usize..200, b0 in 1e-5..0.01f64, span in 0.0..0.3f64) {
        let s = make_schedule(steps, b0, b0 + span, ScheduleKind::Linear).unwrap();
        prop_assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(s.alpha_bar.iter().all(|a| *a > 0.0 && *a < 1.0));
        prop_assert!(s.beta.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn triplane_normalization_round_trips_inside_the_clip(tps in prop::collection::vec(triplane(3, 2), 3)) {
        let stats = TriplaneStats::fit(&tps, 1e6).unwrap();
        for tp in &tps {
            let back = stats.denormalize(&stats.normalize(tp).unwrap()).unwrap();
            for (a, b) in back.data().iter().zip(tp.data()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn chamfer_is_symmetric_and_zero_on_itself(a in soup(6), b in soup(5), seed in 0u64..100) {
        prop_assert_eq!(chamfer(&a, &b, 300, seed).unwrap(), chamfer(&b, &a, 300, seed).unwrap());
        prop_assert_eq!(chamfer(&a, &a, 300, seed).unwrap(), 0.0);
    }

    #[test]
    fn accelerated_self_intersection_count_matches_brute_force(m in soup(24)) {
        prop_assert_eq!(self_intersections(&m), self_intersections_brute_force(&m));
    }

    #[test]
    fn obj_round_trips_bitwise(m in soup(4)) {
        let mut text = Vec::new();
        write_obj(&m, &mut text).unwrap();
        let back = parse_obj(std::str::from_utf8(&text).unwrap(), Path::new("mem.obj")).unwrap();
        prop_assert_eq!(back.vertices, m.vertices);
        prop_assert_eq!(back.triangles, m.triangles);
    }
}
