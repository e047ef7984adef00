use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::scene::{CameraPose, Gaussian3D};

/// Constants of the splatting model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSettings {
    /// Upper clamp on per-splat opacity.
    pub alpha_clamp: f64,
    /// Footprint cut-off in standard deviations.
    pub truncation_sigma: f64,
    /// Added to the projected covariance diagonal, in pixel².
    pub cov_floor: f64,
    /// Coverage below which depth falls back to the background sentinel.
    pub depth_min_alpha: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            alpha_clamp: 0.99,
            truncation_sigma: 3.0,
            cov_floor: 0.3,
            depth_min_alpha: 1e-4,
        }
    }
}

/// A Gaussian mapped onto the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d` as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    /// Camera-space z of the mean.
    pub depth: f64,
    /// Camera-space mean.
    pub t: Vector3<f64>,
    /// Perspective Jacobian at `t`.
    pub jacobian: Matrix2x3<f64>,
    /// Camera-space covariance `W Σ Wᵀ`.
    pub cov_cam: Matrix3<f64>,
    /// Half extents of the truncated footprint's bounding box, in pixels.
    pub extent: Vector2<f64>,
}

/// EWA projection; `None` when the mean lies outside the clip range.
pub fn project(g: &Gaussian3D, cam: &CameraPose, settings: &RenderSettings) -> Option<Projected> {
    project_with(g, cam, &cam.rotation(), settings)
}

pub(crate) fn project_with(
    g: &Gaussian3D,
    cam: &CameraPose,
    w: &Matrix3<f64>,
    settings: &RenderSettings,
) -> Option<Projected> {
    let t = w * (g.mean - cam.position);
    if !(t.z >= cam.near && t.z <= cam.far) {
        return None;
    }
    let f = cam.focal();
    let (cx, cy) = cam.principal_point();
    let inv_z = 1.0 / t.z;
    let mean2d = Vector2::new(f * t.x * inv_z + cx, f * t.y * inv_z + cy);
    let jacobian = Matrix2x3::new(
        f * inv_z,
        0.0,
        -f * t.x * inv_z * inv_z,
        0.0,
        f * inv_z,
        -f * t.y * inv_z * inv_z,
    );
    let cov_cam = w * g.covariance() * w.transpose();
    let mut cov2d = jacobian * cov_cam * jacobian.transpose();
    // Exact symmetry keeps the conic and the bounding box consistent.
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;
    cov2d[(0, 0)] += settings.cov_floor;
    cov2d[(1, 1)] += settings.cov_floor;
    let (a, b, c) = (cov2d[(0, 0)], cov2d[(0, 1)], cov2d[(1, 1)]);
    let det = a * c - b * b;
    if !(det > 0.0) {
        return None;
    }
    let conic = [c / det, -b / det, a / det];
    let k = settings.truncation_sigma;
    let extent = Vector2::new(k * a.sqrt(), k * c.sqrt());
    Some(Projected {
        mean2d,
        cov2d,
        conic,
        depth: t.z,
        t,
        jacobian,
        cov_cam,
        extent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Intrinsics;

    fn cam(d: f64) -> CameraPose {
        CameraPose::orbit(0.0, 0.0, d, Intrinsics::default()).unwrap()
    }

    #[test]
    fn target_projects_to_image_center() {
        let g = Gaussian3D::isotropic(Vector3::zeros(), 0.1, 0.5, Vector3::zeros());
        let p = project(&g, &cam(4.0), &RenderSettings::default()).unwrap();
        assert!((p.mean2d - Vector2::new(32.0, 32.0)).norm() < 0.5);
        assert!((p.depth - 4.0).abs() < 1e-12);
    }

    #[test]
    fn on_axis_isotropic_closed_form() {
        let sigma = 0.07;
        let d = 3.0;
        let c = cam(d);
        let g = Gaussian3D::isotropic(Vector3::zeros(), sigma, 0.5, Vector3::zeros());
        let p = project(&g, &c, &RenderSettings::default()).unwrap();
        let f = c.focal();
        let expected = sigma * sigma * (f / d).powi(2) + 0.3;
        assert!((p.cov2d[(0, 0)] - expected).abs() < 1e-10 * expected);
        assert!((p.cov2d[(1, 1)] - expected).abs() < 1e-10 * expected);
        assert!(p.cov2d[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn doubling_distance_halves_projected_std() {
        let g = Gaussian3D::isotropic(Vector3::zeros(), 0.2, 0.5, Vector3::zeros());
        let s = RenderSettings::default();
        let near = project(&g, &cam(2.5), &s).unwrap();
        let far = project(&g, &cam(5.0), &s).unwrap();
        let sd = |p: &Projected| (p.cov2d[(0, 0)] - 0.3).sqrt();
        assert!((sd(&near) / sd(&far) - 2.0).abs() < 1e-10);
    }

    #[test]
    fn behind_camera_is_culled() {
        let g = Gaussian3D::isotropic(Vector3::new(10.0, 0.0, 0.0), 0.1, 0.5, Vector3::zeros());
        assert!(project(&g, &cam(4.0), &RenderSettings::default()).is_none());
    }
}
