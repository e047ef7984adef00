//! A static 3D kd-tree for nearest-neighbour queries.
//!
//! Ties are resolved towards the lowest point index so query results are
//! reproducible and match an exhaustive scan.

use nalgebra::Vector3;

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    /// Point indices arranged as an implicit balanced tree.
    order: Vec<u32>,
    /// Split axis for every node of `order`.
    axes: Vec<u8>,
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut axes = vec![0u8; points.len()];
        build(points, &mut order, &mut axes, 0);
        Self {
            points: points.to_vec(),
            order,
            axes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    /// Index and squared distance of the closest point.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        let mut best = Best::new(1, None);
        self.search(0, self.order.len(), q, &mut best);
        best.items.first().map(|&(d, i)| (i as usize, d))
    }

    /// The `k` closest points sorted by (distance, index), optionally skipping one index.
    pub fn k_nearest(&self, q: &Vector3<f64>, k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let mut best = Best::new(k, exclude.map(|e| e as u32));
        self.search(0, self.order.len(), q, &mut best);
        best.items.into_iter().map(|(d, i)| (i as usize, d)).collect()
    }

    fn search(&self, lo: usize, hi: usize, q: &Vector3<f64>, best: &mut Best) {
        self.search_box(lo, hi, q, best, 0.0, &mut [0.0; 3]);
    }

    /// `rd` is the squared distance from `q` to the cell of this subtree,
    /// assembled from the per-axis offsets in `off`.
    fn search_box(&self, lo: usize, hi: usize, q: &Vector3<f64>, best: &mut Best, rd: f64, off: &mut [f64; 3]) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx as usize];
        best.offer((p - q).norm_squared(), idx);
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search_box(near.0, near.1, q, best, rd, off);
        let old = off[axis];
        let far_rd = rd - old * old + diff * diff;
        // `<=` keeps equidistant candidates with smaller indices reachable.
        if far_rd <= best.bound() {
            off[axis] = diff;
            self.search_box(far.0, far.1, q, best, far_rd, off);
            off[axis] = old;
        }
    }
}

fn build(points: &[Vector3<f64>], order: &mut [u32], axes: &mut [u8], depth: usize) {
    if order.is_empty() {
        return;
    }
    // Split on the axis of largest extent.
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for &i in order.iter() {
        let p = &points[i as usize];
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let extent = hi - lo;
    let axis = if extent.x >= extent.y && extent.x >= extent.z {
        0
    } else if extent.y >= extent.z {
        1
    } else {
        2
    };
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis]
            .total_cmp(&points[b as usize][axis])
            .then(a.cmp(&b))
    });
    axes[mid] = axis as u8;
    let (left, right) = order.split_at_mut(mid);
    let (left_axes, right_axes) = axes.split_at_mut(mid);
    build(points, left, left_axes, depth + 1);
    build(points, &mut right[1..], &mut right_axes[1..], depth + 1);
}

struct Best {
    k: usize,
    exclude: Option<u32>,
    /// Sorted ascending by (distance, index).
    items: Vec<(f64, u32)>,
}

impl Best {
    fn new(k: usize, exclude: Option<u32>) -> Self {
        Self {
            k,
            exclude,
            items: Vec::with_capacity(k + 1),
        }
    }

    fn bound(&self) -> f64 {
        if self.items.len() < self.k {
            f64::INFINITY
        } else {
            self.items[self.items.len() - 1].0
        }
    }

    fn offer(&mut self, d: f64, idx: u32) {
        if Some(idx) == self.exclude {
            return;
        }
        let key = (d, idx);
        if self.items.len() == self.k {
            let last = self.items[self.k - 1];
            if (key.0, key.1) >= (last.0, last.1) {
                return;
            }
        }
        let pos = self
            .items
            .partition_point(|&(bd, bi)| (bd, bi) < (key.0, key.1));
        self.items.insert(pos, key);
        self.items.truncate(self.k);
    }
}

/// Exhaustive nearest neighbour with lowest-index tie-break.
pub fn brute_force_nearest(points: &[Vector3<f64>], q: &Vector3<f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let d = (p - q).norm_squared();
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect()
    }

    #[test]
    fn nearest_matches_exhaustive_scan() {
        let pts = cloud(500, 3);
        let tree = KdTree::new(&pts);
        for q in cloud(200, 4) {
            assert_eq!(tree.nearest(&q), brute_force_nearest(&pts, &q));
        }
    }

    #[test]
    fn k_nearest_matches_sorted_scan() {
        let pts = cloud(300, 5);
        let tree = KdTree::new(&pts);
        for (qi, q) in pts.iter().enumerate().take(50) {
            let mut all: Vec<(usize, f64)> = pts
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != qi)
                .map(|(i, p)| (i, (p - q).norm_squared()))
                .collect();
            all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            all.truncate(3);
            assert_eq!(tree.k_nearest(q, 3, Some(qi)), all);
        }
    }

    #[test]
    fn duplicate_points_resolve_to_lowest_index() {
        let pts = vec![Vector3::new(1.0, 0.0, 0.0); 5];
        let tree = KdTree::new(&pts);
        assert_eq!(tree.nearest(&Vector3::zeros()).unwrap().0, 0);
    }

    #[test]
    fn empty_tree_has_no_neighbours() {
        let tree = KdTree::new(&[]);
        assert!(tree.nearest(&Vector3::zeros()).is_none());
    }
}
