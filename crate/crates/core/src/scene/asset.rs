//! Reference assets: the high-fidelity object whose renders guide optimization.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gaussian::{Gaussian3D, GaussianScene};
use crate::error::{Error, Result};
use crate::spatial::KdTree;

/// Opacity given to each reference point when splatted.
pub const REFERENCE_POINT_OPACITY: f64 = 0.99;
/// Point footprint radius as a fraction of the mean nearest-neighbour spacing.
pub const REFERENCE_FOOTPRINT: f64 = 0.5;
/// Meshes with fewer vertices are topped up with area-sampled surface points.
pub const MIN_MESH_POINTS: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub colors: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingSphere {
    pub center: Vector3<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone)]
pub struct ReferenceAsset {
    pub points: Vec<Vector3<f64>>,
    pub colors: Vec<Vector3<f64>>,
    pub mesh: Option<TriangleMesh>,
    pub caption: String,
    /// Bounding sphere after normalization (unit radius at the origin).
    pub bounds: BoundingSphere,
    /// Transform that was applied at load: `p' = (p - center) / radius`.
    pub normalization: BoundingSphere,
    /// World-space footprint of each splatted point.
    pub point_radius: f64,
    tree: KdTree,
    splats: GaussianScene,
}

impl ReferenceAsset {
    /// Builds an asset from a point cloud, normalizing it to the unit bounding sphere.
    pub fn from_points(
        points: Vec<Vector3<f64>>,
        colors: Vec<Vector3<f64>>,
        caption: impl Into<String>,
    ) -> Result<Self> {
        Self::build(points, colors, None, caption.into())
    }

    /// Builds an asset from a triangle mesh. The point-cloud form holds the
    /// vertices, topped up with deterministic surface samples for sparse meshes.
    pub fn from_mesh(mesh: TriangleMesh, caption: impl Into<String>) -> Result<Self> {
        if mesh.vertices.is_empty() {
            return Err(Error::invalid("mesh has no vertices"));
        }
        if mesh.colors.len() != mesh.vertices.len() {
            return Err(Error::invalid("mesh colors and vertices differ in length"));
        }
        for f in &mesh.faces {
            if f.iter().any(|&i| i as usize >= mesh.vertices.len()) {
                return Err(Error::invalid("mesh face references a missing vertex"));
            }
        }
        let mut points = mesh.vertices.clone();
        let mut colors = mesh.colors.clone();
        if points.len() < MIN_MESH_POINTS && !mesh.faces.is_empty() {
            let (extra_p, extra_c) = sample_surface(&mesh, MIN_MESH_POINTS - points.len());
            points.extend(extra_p);
            colors.extend(extra_c);
        }
        Self::build(points, colors, Some(mesh), caption.into())
    }

    fn build(
        mut points: Vec<Vector3<f64>>,
        colors: Vec<Vector3<f64>>,
        mut mesh: Option<TriangleMesh>,
        caption: String,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("reference asset needs at least one point"));
        }
        if colors.len() != points.len() {
            return Err(Error::invalid("asset colors and points differ in length"));
        }
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid("asset contains non-finite coordinates"));
        }
        let normalization = bounding_sphere(&points);
        let apply = |p: &Vector3<f64>| (p - normalization.center) / normalization.radius;
        for p in points.iter_mut() {
            *p = apply(p);
        }
        if let Some(m) = mesh.as_mut() {
            for v in m.vertices.iter_mut() {
                *v = apply(v);
            }
        }
        let tree = KdTree::new(&points);
        let point_radius = footprint_radius(&tree);
        let splats = GaussianScene::new(
            points
                .iter()
                .zip(colors.iter())
                .map(|(p, c)| Gaussian3D::isotropic(*p, point_radius, REFERENCE_POINT_OPACITY, *c))
                .collect(),
        );
        // Bounds are recomputed so they contain every point despite rounding.
        let radius = points.iter().map(|p| p.norm()).fold(0.0, f64::max).max(1.0);
        Ok(Self {
            points,
            colors,
            mesh,
            caption,
            bounds: BoundingSphere {
                center: Vector3::zeros(),
                radius,
            },
            normalization,
            point_radius,
            tree,
            splats,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn tree(&self) -> &KdTree {
        &self.tree
    }

    /// The asset as isotropic splats; rendering this scene reproduces the
    /// point-based reference render exactly.
    pub fn splat_scene(&self) -> &GaussianScene {
        &self.splats
    }

    /// Mirrored copy (x -> -x) overlaid on the original.
    pub fn with_mirrored_overlay(&self, caption: impl Into<String>) -> Result<Self> {
        let mut points = self.points.clone();
        let mut colors = self.colors.clone();
        points.extend(self.points.iter().map(|p| Vector3::new(-p.x, p.y, p.z)));
        colors.extend(self.colors.iter().copied());
        Self::from_points(points, colors, caption)
    }
}

/// Center of the axis-aligned bounding box with the radius that covers all points.
pub fn bounding_sphere(points: &[Vector3<f64>]) -> BoundingSphere {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let center = (lo + hi) * 0.5;
    let radius = points.iter().map(|p| (p - center).norm()).fold(0.0, f64::max);
    BoundingSphere {
        center,
        radius: if radius > 0.0 { radius } else { 1.0 },
    }
}

fn footprint_radius(tree: &KdTree) -> f64 {
    let pts = tree.points();
    if pts.len() < 2 {
        return 0.02;
    }
    let total: f64 = pts
        .iter()
        .enumerate()
        .map(|(i, p)| tree.k_nearest(p, 1, Some(i))[0].1.sqrt())
        .sum();
    let mean = total / pts.len() as f64;
    if mean > 0.0 {
        REFERENCE_FOOTPRINT * mean
    } else {
        0.02
    }
}

fn sample_surface(mesh: &TriangleMesh, count: usize) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let areas: Vec<f64> = mesh
        .faces
        .iter()
        .map(|f| {
            let [a, b, c] = f.map(|i| mesh.vertices[i as usize]);
            0.5 * (b - a).cross(&(c - a)).norm()
        })
        .collect();
    let total: f64 = areas.iter().sum();
    if !(total > 0.0) {
        return (Vec::new(), Vec::new());
    }
    let mut cdf = Vec::with_capacity(areas.len());
    let mut acc = 0.0;
    for a in &areas {
        acc += a / total;
        cdf.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut pts = Vec::with_capacity(count);
    let mut cols = Vec::with_capacity(count);
    for _ in 0..count {
        let u: f64 = rng.random();
        let fi = cdf.partition_point(|&c| c < u).min(mesh.faces.len() - 1);
        let [ia, ib, ic] = mesh.faces[fi].map(|i| i as usize);
        let (mut r1, mut r2): (f64, f64) = (rng.random(), rng.random());
        if r1 + r2 > 1.0 {
            r1 = 1.0 - r1;
            r2 = 1.0 - r2;
        }
        let w0 = 1.0 - r1 - r2;
        pts.push(mesh.vertices[ia] * w0 + mesh.vertices[ib] * r1 + mesh.vertices[ic] * r2);
        cols.push(mesh.colors[ia] * w0 + mesh.colors[ib] * r1 + mesh.colors[ic] * r2);
    }
    (pts, cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_to_unit_bounding_sphere() {
        let pts = vec![
            Vector3::new(10.0, 10.0, 10.0),
            Vector3::new(14.0, 10.0, 10.0),
            Vector3::new(12.0, 13.0, 10.0),
        ];
        let asset = ReferenceAsset::from_points(pts, vec![Vector3::repeat(0.5); 3], "tri").unwrap();
        let max = asset.points.iter().map(|p| p.norm()).fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
        for p in &asset.points {
            assert!(p.norm() <= asset.bounds.radius);
        }
    }

    #[test]
    fn empty_asset_is_rejected() {
        assert!(matches!(
            ReferenceAsset::from_points(vec![], vec![], "none"),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn single_point_stays_at_origin() {
        let asset =
            ReferenceAsset::from_points(vec![Vector3::zeros()], vec![Vector3::repeat(1.0)], "dot").unwrap();
        assert_eq!(asset.points[0], Vector3::zeros());
    }

    #[test]
    fn sparse_mesh_is_topped_up_with_surface_samples() {
        let mesh = TriangleMesh {
            vertices: vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
            ],
            colors: vec![Vector3::repeat(1.0); 3],
            faces: vec![[0, 1, 2]],
        };
        let asset = ReferenceAsset::from_mesh(mesh, "triangle").unwrap();
        assert_eq!(asset.len(), MIN_MESH_POINTS);
        for p in &asset.points {
            assert!(p.z.abs() < 1e-12);
        }
    }
}
