//! Pinhole cameras and the orbit sampler used during optimization.
//!
//! Camera space is right-handed with +z along the viewing direction, +x to
//! the right and +y pointing down the image. Pixel `(i, j)` has its center at
//! `(i + 0.5, j + 0.5)` and the principal point sits at `(width / 2, height / 2)`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image size, field of view and clip planes shared by every sampled pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Intrinsics {
    /// Vertical field of view in radians.
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self {
            fov_y: 40f64.to_radians(),
            width: 64,
            height: 64,
            near: 0.1,
            far: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub position: Vector3<f64>,
    pub target: Vector3<f64>,
    pub up: Vector3<f64>,
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl CameraPose {
    pub fn look_at(
        position: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        intrinsics: Intrinsics,
    ) -> Result<Self> {
        let cam = Self {
            position,
            target,
            up,
            fov_y: intrinsics.fov_y,
            width: intrinsics.width,
            height: intrinsics.height,
            near: intrinsics.near,
            far: intrinsics.far,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera on a sphere around the origin. Azimuth is measured from +x
    /// towards +y, elevation from the xy-plane towards +z (world up).
    pub fn orbit(azimuth: f64, elevation: f64, radius: f64, intrinsics: Intrinsics) -> Result<Self> {
        let position = Vector3::new(
            radius * elevation.cos() * azimuth.cos(),
            radius * elevation.cos() * azimuth.sin(),
            radius * elevation.sin(),
        );
        Self::look_at(position, Vector3::zeros(), Vector3::z(), intrinsics)
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fov_y: self.fov_y,
            width: self.width,
            height: self.height,
            near: self.near,
            far: self.far,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0) || !(self.far > self.near) {
            return Err(Error::config(format!(
                "camera clip planes must satisfy 0 < near < far (near={}, far={})",
                self.near, self.far
            )));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::config(format!(
                "camera image must be at least 8x8 (got {}x{})",
                self.width, self.height
            )));
        }
        if !(self.fov_y > 0.0 && self.fov_y < PI) {
            return Err(Error::config(format!("field of view {} out of (0, pi)", self.fov_y)));
        }
        let forward = self.target - self.position;
        if !(forward.norm() > 0.0) {
            return Err(Error::config("camera position coincides with its target"));
        }
        let cross = forward.normalize().cross(&self.up);
        if !(self.up.norm() > 0.0) || cross.norm() < 1e-9 * self.up.norm() {
            return Err(Error::config("camera up vector is parallel to the view direction"));
        }
        Ok(())
    }

    /// Focal length in pixels (square pixels).
    pub fn focal(&self) -> f64 {
        0.5 * self.height as f64 / (0.5 * self.fov_y).tan()
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (0.5 * self.width as f64, 0.5 * self.height as f64)
    }

    /// World-to-camera rotation; rows are the camera axes in world coordinates.
    pub fn rotation(&self) -> Matrix3<f64> {
        let forward = (self.target - self.position).normalize();
        let right = forward.cross(&self.up).normalize();
        let true_up = right.cross(&forward);
        let down = -true_up;
        Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()])
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * (p - self.position)
    }

    /// Azimuth (in (-pi, pi]) and elevation of the camera as seen from its target.
    pub fn azimuth_elevation(&self) -> (f64, f64) {
        let d = self.position - self.target;
        let horizontal = (d.x * d.x + d.y * d.y).sqrt();
        let mut az = d.y.atan2(d.x);
        if az <= -PI {
            az += 2.0 * PI;
        }
        (az, d.z.atan2(horizontal))
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Closed interval `[lo, hi]`; a degenerate interval pins the value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn check(&self, what: &str) -> Result<()> {
        if !self.lo.is_finite() || !self.hi.is_finite() || self.hi < self.lo {
            return Err(Error::config(format!(
                "{what} range [{}, {}] is empty or inverted",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        self.lo + (self.hi - self.lo) * u
    }
}

/// Samples look-at-origin cameras on a spherical shell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSampler {
    pub elevation: Range,
    pub azimuth: Range,
    pub radius: Range,
    pub intrinsics: Intrinsics,
}

impl Default for CameraSampler {
    fn default() -> Self {
        Self {
            elevation: Range::new((-10f64).to_radians(), 45f64.to_radians()),
            azimuth: Range::new(0.0, 2.0 * PI),
            radius: Range::new(3.5, 4.5),
            intrinsics: Intrinsics::default(),
        }
    }
}

impl CameraSampler {
    pub fn validate(&self) -> Result<()> {
        self.elevation.check("elevation")?;
        self.azimuth.check("azimuth")?;
        self.radius.check("radius")?;
        if self.radius.lo <= 0.0 {
            return Err(Error::config("camera radius range must be positive"));
        }
        let limit = 89.9f64.to_radians();
        if self.elevation.lo < -limit || self.elevation.hi > limit {
            return Err(Error::config("elevation range must stay strictly inside (-90, 90) degrees"));
        }
        if self.radius.lo <= self.intrinsics.near {
            return Err(Error::config("camera radius must exceed the near plane"));
        }
        Ok(())
    }

    /// Draws azimuth, elevation and radius (in that order) uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<CameraPose> {
        self.validate()?;
        let az = self.azimuth.sample(rng);
        let el = self.elevation.sample(rng);
        let r = self.radius.sample(rng);
        CameraPose::orbit(az, el, r, self.intrinsics)
    }
}

pub fn sample_camera<R: Rng + ?Sized>(
    rng: &mut R,
    elevation_range: Range,
    azimuth_range: Range,
    radius_range: Range,
    intrinsics: Intrinsics,
) -> Result<CameraPose> {
    CameraSampler {
        elevation: elevation_range,
        azimuth: azimuth_range,
        radius: radius_range,
        intrinsics,
    }
    .sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_ranges_pin_the_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cam = sample_camera(
            &mut rng,
            Range::fixed(0.0),
            Range::fixed(0.0),
            Range::fixed(2.0),
            Intrinsics::default(),
        )
        .unwrap();
        assert!((cam.position - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-15);
        let p = cam.world_to_camera(&Vector3::zeros());
        assert!(p.x.abs() < 1e-15 && p.y.abs() < 1e-15);
        assert!((p.z - 2.0).abs() < 1e-15);
    }

    #[test]
    fn same_seed_same_pose() {
        let s = CameraSampler::default();
        let a = s.sample(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = s.sample(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inverted_range_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = sample_camera(
            &mut rng,
            Range::new(0.2, 0.1),
            Range::fixed(0.0),
            Range::fixed(2.0),
            Intrinsics::default(),
        );
        assert!(matches!(err, Err(Error::Config(_))));
        let err = sample_camera(
            &mut rng,
            Range::fixed(0.0),
            Range::fixed(0.0),
            Range::new(-1.0, 2.0),
            Intrinsics::default(),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn azimuth_histogram_is_uniform() {
        // Chi-square against the uniform law over 8 octants; 99.9% quantile
        // with 7 degrees of freedom is 24.32.
        let s = CameraSampler::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let n = 10_000;
        let mut bins = [0usize; 8];
        for _ in 0..n {
            let cam = s.sample(&mut rng).unwrap();
            let (az, _) = cam.azimuth_elevation();
            let az = az.rem_euclid(2.0 * PI);
            bins[((az / (2.0 * PI) * 8.0) as usize).min(7)] += 1;
        }
        let expected = n as f64 / 8.0;
        let chi2: f64 = bins.iter().map(|&b| (b as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 24.32, "chi2 = {chi2}, bins = {bins:?}");
        for &b in &bins {
            assert!((b as f64 - expected).abs() / expected < 0.05, "bins = {bins:?}");
        }
    }

    #[test]
    fn up_parallel_to_view_is_rejected() {
        let err = CameraPose::look_at(
            Vector3::new(0.0, 0.0, 3.0),
            Vector3::zeros(),
            Vector3::z(),
            Intrinsics::default(),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn rotation_is_orthonormal_and_right_handed() {
        let cam = CameraPose::orbit(0.7, 0.3, 4.0, Intrinsics::default()).unwrap();
        let r = cam.rotation();
        assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }
}
