use crate::field::Point;
use crate::geometry::mesh::dist2;

const LEAF: usize = 8;

/// Static 3-d tree for exact nearest-neighbour queries.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Point>,
    /// Permutation of point indices; every node owns a contiguous range.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone)]
struct Node {
    start: usize,
    end: usize,
    axis: usize,
    split: f64,
    children: Option<(usize, usize)>,
}

impl KdTree {
    pub fn new(points: Vec<Point>) -> Self {
        let mut tree = Self { order: (0..points.len()).collect(), points, nodes: Vec::new() };
        if !tree.points.is_empty() {
            tree.build(0, tree.points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node { start, end, axis: 0, split: 0.0, children: None });
        if end - start <= LEAF {
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap();
        let mid = (start + end) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let split = self.points[self.order[mid]][axis];
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        let node = &mut self.nodes[id];
        node.axis = axis;
        node.split = split;
        node.children = Some((left, right));
        id
    }

    /// Index and squared distance of the closest point; ties go to the
    /// first one found. `None` on an empty tree.
    pub fn nearest(&self, q: Point) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, q, &mut best);
        Some(best)
    }

    fn search(&self, id: usize, q: Point, best: &mut (usize, f64)) {
        let node = &self.nodes[id];
        match node.children {
            None => {
                for &i in &self.order[node.start..node.end] {
                    let d = dist2(q, self.points[i]);
                    if d < best.1 {
                        *best = (i, d);
                    }
                }
            }
            Some((left, right)) => {
                let delta = q[node.axis] - node.split;
                let (near, far) = if delta < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                if delta * delta <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut pt = || [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let points: Vec<Point> = (0..2000).map(|_| pt()).collect();
        let tree = KdTree::new(points.clone());
        for _ in 0..300 {
            let q = pt();
            let brute = points.iter().map(|p| dist2(q, *p)).fold(f64::INFINITY, f64::min);
            let (i, d) = tree.nearest(q).unwrap();
            assert_eq!(d, brute);
            assert_eq!(dist2(q, points[i]), d);
        }
        assert!(KdTree::new(Vec::new()).nearest([0.0; 3]).is_none());
    }

    #[test]
    fn duplicate_points_are_handled() {
        let tree = KdTree::new(vec![[0.5, 0.5, 0.5]; 100]);
        assert_eq!(tree.nearest([0.0; 3]).unwrap().1, 0.75);
    }
}
