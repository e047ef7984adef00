//! Scene initialization from the reference point cloud.

use nalgebra::Vector3;

use super::asset::ReferenceAsset;
use super::gaussian::{Gaussian3D, GaussianScene};
use crate::error::{Error, Result};
use crate::spatial::KdTree;

pub const INIT_OPACITY: f64 = 0.1;
/// Scale used when a single Gaussian has no neighbour to measure against.
pub const LONE_GAUSSIAN_SCALE: f64 = 0.1;

/// Greedy farthest-point sampling. The first pick is the point farthest from
/// the centroid; ties go to the lowest index throughout.
pub fn farthest_point_sampling(points: &[Vector3<f64>], n: usize) -> Vec<usize> {
    let n = n.min(points.len());
    if n == 0 {
        return Vec::new();
    }
    let centroid = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let mut first = 0;
    let mut best = f64::NEG_INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = (p - centroid).norm_squared();
        if d > best {
            best = d;
            first = i;
        }
    }
    let mut picks = Vec::with_capacity(n);
    picks.push(first);
    let mut dist: Vec<f64> = points.iter().map(|p| (p - points[first]).norm_squared()).collect();
    while picks.len() < n {
        let mut next = 0;
        let mut far = f64::NEG_INFINITY;
        for (i, &d) in dist.iter().enumerate() {
            if d > far {
                far = d;
                next = i;
            }
        }
        picks.push(next);
        let q = points[next];
        for (d, p) in dist.iter_mut().zip(points) {
            let nd = (p - q).norm_squared();
            if nd < *d {
                *d = nd;
            }
        }
    }
    picks
}

/// `n` isotropic Gaussians on farthest-point samples of the asset.
pub fn init_from_pointcloud(asset: &ReferenceAsset, n: usize) -> Result<GaussianScene> {
    if n == 0 {
        return Err(Error::config("initial gaussian count must be at least 1"));
    }
    if asset.is_empty() {
        return Err(Error::invalid("asset has no points"));
    }
    let picks = farthest_point_sampling(&asset.points, n);
    let means: Vec<Vector3<f64>> = picks.iter().map(|&i| asset.points[i]).collect();
    let scale = mean_nn_distance(&means).unwrap_or(LONE_GAUSSIAN_SCALE);
    let gaussians = picks
        .iter()
        .zip(&means)
        .map(|(&i, m)| Gaussian3D::isotropic(*m, scale, INIT_OPACITY, asset.colors[i]))
        .collect();
    Ok(GaussianScene::new(gaussians))
}

/// Mean distance from each point to its nearest other point; `None` for
/// fewer than two points or fully coincident clouds.
pub fn mean_nn_distance(points: &[Vector3<f64>]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let tree = KdTree::new(points);
    let total: f64 = points
        .iter()
        .enumerate()
        .map(|(i, p)| tree.k_nearest(p, 1, Some(i))[0].1.sqrt())
        .sum();
    let mean = total / points.len() as f64;
    (mean > 0.0).then_some(mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corners() -> Vec<Vector3<f64>> {
        let mut v = Vec::new();
        for x in [0.0, 1.0] {
            for y in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    v.push(Vector3::new(x, y, z));
                }
            }
        }
        v
    }

    #[test]
    fn cube_corners_are_all_picked() {
        // Corners plus interior clutter; FPS with n=8 must return the corners.
        let mut pts = vec![Vector3::new(0.5, 0.5, 0.5), Vector3::new(0.4, 0.6, 0.5), Vector3::new(0.3, 0.3, 0.7)];
        pts.extend(corners());
        let picks = farthest_point_sampling(&pts, 8);
        let mut sorted = picks.clone();
        sorted.sort();
        assert_eq!(sorted, (3..11).collect::<Vec<_>>());
    }

    #[test]
    fn exact_count_is_a_permutation() {
        let pts: Vec<_> = (0..20).map(|i| Vector3::new((i as f64).sin(), (i as f64 * 0.7).cos(), i as f64 * 0.05)).collect();
        let asset = ReferenceAsset::from_points(pts, vec![Vector3::repeat(0.5); 20], "x").unwrap();
        let scene = init_from_pointcloud(&asset, 20).unwrap();
        let mut got: Vec<[u64; 3]> = scene.gaussians.iter().map(|g| g.mean.map(f64::to_bits).into()).collect();
        let mut want: Vec<[u64; 3]> = asset.points.iter().map(|p| p.map(f64::to_bits).into()).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
        for g in &scene.gaussians {
            assert!((g.opacity() - INIT_OPACITY).abs() < 1e-12);
        }
    }

    #[test]
    fn single_pick_is_farthest_from_centroid() {
        let pts = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.1, 0.0, 0.0),
            Vector3::new(-0.1, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        let centroid: Vector3<f64> = pts.iter().sum::<Vector3<f64>>() / 4.0;
        let brute = (0..4)
            .max_by(|&a, &b| (pts[a] - centroid).norm().total_cmp(&(pts[b] - centroid).norm()).then(b.cmp(&a)))
            .unwrap();
        assert_eq!(farthest_point_sampling(&pts, 1), vec![brute]);
        assert_eq!(brute, 3);
    }

    #[test]
    fn zero_count_is_rejected() {
        let asset = ReferenceAsset::from_points(corners(), vec![Vector3::zeros(); 8], "c").unwrap();
        assert!(init_from_pointcloud(&asset, 0).is_err());
    }
}
