use std::cmp::Ordering;

use super::Vec3;
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 12;

/// A neighbor returned by [`SpatialIndex`] queries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Insertion index of the point in the indexed set.
    pub index: usize,
    pub distance_squared: f64,
    pub distance: f64,
}

impl Neighbor {
    fn new(index: usize, distance_squared: f64) -> Self {
        Self {
            index,
            distance_squared,
            distance: distance_squared.sqrt(),
        }
    }

    fn rank(&self, other: &Self) -> Ordering {
        self.distance_squared
            .total_cmp(&other.distance_squared)
            .then(self.index.cmp(&other.index))
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Immutable k-d tree over a 3D point set.
///
/// Results are ordered by `(distance, insertion index)`, so ties resolve to
/// the lower index and every query is deterministic.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// Squared Euclidean distance; every distance in the crate goes through here.
#[inline]
pub(crate) fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

impl SpatialIndex {
    pub fn new(points: &[Vec3]) -> Self {
        let mut index = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            index.build(0, points.len());
        }
        index
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let slice = &self.order[start..end];
        let mut lo = self.points[slice[0]];
        let mut hi = lo;
        for &i in slice {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        if hi[axis] - lo[axis] <= 0.0 {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis]
                .total_cmp(&points[b][axis])
                .then(a.cmp(&b))
        });
        let value = self.points[self.order[start + mid]][axis];
        self.nodes.push(Node::Split {
            axis,
            value,
            left: 0,
            right: 0,
        });
        let left = self.build(start, start + mid);
        let right = self.build(start + mid, end);
        if let Node::Split {
            left: l, right: r, ..
        } = &mut self.nodes[id]
        {
            *l = left;
            *r = right;
        }
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn point(&self, index: usize) -> Vec3 {
        self.points[index]
    }

    /// The `k` nearest points, nearest first.
    pub fn knn(&self, query: &Vec3, k: usize) -> Result<Vec<Neighbor>> {
        if k == 0 {
            return Err(Error::Argument("k must be positive".into()));
        }
        if k > self.points.len() {
            return Err(Error::Argument(format!(
                "k = {k} exceeds indexed set size {}",
                self.points.len()
            )));
        }
        let mut best: Vec<Neighbor> = Vec::with_capacity(k + 1);
        self.knn_visit(0, query, k, &mut best);
        Ok(best)
    }

    fn knn_visit(&self, node: usize, query: &Vec3, k: usize, best: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = Neighbor::new(i, dist2(query, &self.points[i]));
                    if best.len() == k && cand.rank(&best[k - 1]) != Ordering::Less {
                        continue;
                    }
                    let pos = best
                        .binary_search_by(|n| n.rank(&cand))
                        .unwrap_or_else(|p| p);
                    best.insert(pos, cand);
                    best.truncate(k);
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_visit(near, query, k, best);
                if best.len() < k || diff * diff <= best[k - 1].distance_squared {
                    self.knn_visit(far, query, k, best);
                }
            }
        }
    }

    pub fn nearest(&self, query: &Vec3) -> Result<Neighbor> {
        Ok(self.knn(query, 1)?[0])
    }

    /// All points with distance strictly below `radius`, nearest first.
    pub fn within_radius(&self, query: &Vec3, radius: f64) -> Vec<Neighbor> {
        let mut out = Vec::new();
        if !self.points.is_empty() {
            self.radius_visit(0, query, radius * radius, &mut out);
        }
        out.sort_by(|a, b| a.rank(b));
        out
    }

    fn radius_visit(&self, node: usize, query: &Vec3, r2: f64, out: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = dist2(query, &self.points[i]);
                    if d2 < r2 {
                        out.push(Neighbor::new(i, d2));
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.radius_visit(near, query, r2, out);
                if diff * diff < r2 {
                    self.radius_visit(far, query, r2, out);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(points: &[Vec3], q: &Vec3, k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, dist2(q, p)))
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn hand_case() {
        let pts = [
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(3.0, 0.0, 0.0),
        ];
        let index = SpatialIndex::new(&pts);
        let nn = index.knn(&Vec3::new(0.9, 0.0, 0.0), 2).unwrap();
        assert_eq!(nn[0].index, 1);
        assert!((nn[0].distance - 0.1).abs() < 1e-12);
        assert_eq!(nn[1].index, 0);
        assert!((nn[1].distance - 0.9).abs() < 1e-12);

        let own = index.knn(&pts[2], 1).unwrap();
        assert_eq!(own[0].index, 2);
        assert_eq!(own[0].distance, 0.0);

        let all = index.knn(&Vec3::new(10.0, 0.0, 0.0), 3).unwrap();
        assert_eq!(
            all.iter().map(|n| n.index).collect::<Vec<_>>(),
            vec![2, 1, 0]
        );
        assert!(index.knn(&pts[0], 4).is_err());
        assert!(index.knn(&pts[0], 0).is_err());
    }

    #[test]
    fn ties_resolve_to_lower_index() {
        let pts = vec![Vec3::new(1.0, 0.0, 0.0); 40];
        let index = SpatialIndex::new(&pts);
        let nn = index.knn(&Vec3::zeros(), 5).unwrap();
        assert_eq!(
            nn.iter().map(|n| n.index).collect::<Vec<_>>(),
            vec![0, 1, 2, 3, 4]
        );
    }

    #[test]
    fn agrees_with_brute_force_on_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Vec3> = (0..500)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let index = SpatialIndex::new(&pts);
        for _ in 0..100 {
            let q = Vec3::new(
                rng.random_range(-0.2..1.2),
                rng.random_range(-0.2..1.2),
                rng.random_range(-0.2..1.2),
            );
            let k = rng.random_range(1..=20);
            let got: Vec<(usize, f64)> = index
                .knn(&q, k)
                .unwrap()
                .iter()
                .map(|n| (n.index, n.distance_squared))
                .collect();
            assert_eq!(got, brute_force(&pts, &q, k));
        }
    }

    #[test]
    fn radius_query_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec3> = (0..300)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let index = SpatialIndex::new(&pts);
        let q = Vec3::new(0.5, 0.5, 0.5);
        let got: Vec<usize> = index.within_radius(&q, 0.2).iter().map(|n| n.index).collect();
        let want: Vec<usize> = brute_force(&pts, &q, pts.len())
            .into_iter()
            .filter(|&(_, d2)| d2 < 0.04)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(got, want);
    }

    proptest! {
        #[test]
        fn distances_nondecreasing(
            coords in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..80),
            q in (-1.5f64..1.5, -1.5f64..1.5, -1.5f64..1.5),
        ) {
            let pts: Vec<Vec3> = coords.iter().map(|&(x, y, z)| Vec3::new(x, y, z)).collect();
            let index = SpatialIndex::new(&pts);
            let q = Vec3::new(q.0, q.1, q.2);
            let nn = index.knn(&q, pts.len()).unwrap();
            prop_assert_eq!(nn.len(), pts.len());
            for w in nn.windows(2) {
                prop_assert!(w[0].distance <= w[1].distance);
            }
        }
    }
}
