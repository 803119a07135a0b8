use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::Point;
use crate::geometry::kdtree::KdTree;
use crate::geometry::mesh::{dot, TriMesh};

pub const DEFAULT_METRIC_SAMPLES: usize = 30_000;

/// Both meshes are sampled with generators seeded by the same `seed`, so
/// identical meshes yield identical sample sets.
fn paired_samples(a: &TriMesh, b: &TriMesh, n: usize, seed: u64) -> Result<(Vec<(Point, Point)>, Vec<(Point, Point)>)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Metric("mesh metrics need two nonempty meshes".into()));
    }
    if n == 0 {
        return Err(Error::Metric("mesh metrics need at least one sample".into()));
    }
    let sa = a.sample_surface(n, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let sb = b.sample_surface(n, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok((sa, sb))
}

/// For each query sample: squared distance to and index of the nearest
/// target sample.
fn nearest_all(queries: &[(Point, Point)], targets: &KdTree) -> Vec<(usize, f64)> {
    queries.iter().map(|(p, _)| targets.nearest(*p).expect("nonempty tree")).collect()
}

/// Symmetric Chamfer distance: the average of the two directed means of
/// squared nearest-neighbour distances between area-uniform surface samples.
pub fn chamfer(a: &TriMesh, b: &TriMesh, n_samples: usize, seed: u64) -> Result<f64> {
    let (sa, sb) = paired_samples(a, b, n_samples, seed)?;
    let ta = KdTree::new(sa.iter().map(|s| s.0).collect());
    let tb = KdTree::new(sb.iter().map(|s| s.0).collect());
    let ab: f64 = nearest_all(&sa, &tb).iter().map(|x| x.1).sum::<f64>() / sa.len() as f64;
    let ba: f64 = nearest_all(&sb, &ta).iter().map(|x| x.1).sum::<f64>() / sb.len() as f64;
    Ok(0.5 * (ab + ba))
}

/// Mean cosine between each sample's face normal and the normal of its
/// nearest sample on the other mesh, over both directions.
pub fn normal_consistency(a: &TriMesh, b: &TriMesh, n_samples: usize, seed: u64) -> Result<f64> {
    let (sa, sb) = paired_samples(a, b, n_samples, seed)?;
    let ta = KdTree::new(sa.iter().map(|s| s.0).collect());
    let tb = KdTree::new(sb.iter().map(|s| s.0).collect());
    let ab: f64 = nearest_all(&sa, &tb).iter().zip(&sa).map(|((j, _), s)| dot(s.1, sb[*j].1)).sum();
    let ba: f64 = nearest_all(&sb, &ta).iter().zip(&sb).map(|((j, _), s)| dot(s.1, sa[*j].1)).sum();
    Ok((ab + ba) / (sa.len() + sb.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_meshes() {
        let m = TriMesh::icosphere(3);
        assert_eq!(chamfer(&m, &m, 2000, 5).unwrap(), 0.0);
        assert!((normal_consistency(&m, &m, 2000, 5).unwrap() - 1.0).abs() < 1e-6);
        assert!(normal_consistency(&m, &m.flipped(), 2000, 5).unwrap() < -0.98);
    }

    #[test]
    fn symmetric_in_arguments() {
        let a = TriMesh::icosphere(3);
        let b = TriMesh::icosphere(2).scaled(1.2);
        assert_eq!(chamfer(&a, &b, 3000, 1).unwrap(), chamfer(&b, &a, 3000, 1).unwrap());
        assert_eq!(normal_consistency(&a, &b, 3000, 1).unwrap(), normal_consistency(&b, &a, 3000, 1).unwrap());
    }

    #[test]
    fn concentric_spheres_give_squared_gap() {
        let a = TriMesh::icosphere(4);
        let b = a.scaled(1.1);
        let c = chamfer(&a, &b, 20_000, 3).unwrap();
        assert!((c - 0.01).abs() < 1e-3, "{c}");
    }

    #[test]
    fn empty_meshes_are_rejected() {
        let m = TriMesh::icosphere(1);
        assert!(chamfer(&m, &TriMesh::default(), 10, 0).is_err());
        assert!(normal_consistency(&TriMesh::default(), &m, 10, 0).is_err());
    }
}
