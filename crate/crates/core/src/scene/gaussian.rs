//! The optimizable Gaussian representation.
//!
//! Parameters are stored unconstrained: log scales, an opacity logit and a
//! raw quaternion that is normalized whenever it is read. Any real-valued
//! gradient step therefore keeps every Gaussian valid.

use std::cmp::Ordering;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Number of scalar parameters per Gaussian in the flat layout.
pub const PARAMS_PER_GAUSSIAN: usize = 14;

/// Slot ranges of the flat parameter layout.
pub mod slots {
    use std::ops::Range;
    pub const MEAN: Range<usize> = 0..3;
    pub const LOG_SCALE: Range<usize> = 3..6;
    pub const ROTATION: Range<usize> = 6..10;
    pub const OPACITY: usize = 10;
    pub const COLOR: Range<usize> = 11..14;
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian3D {
    pub mean: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    /// Raw quaternion `(w, x, y, z)`; normalized on read.
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
}

impl Gaussian3D {
    pub fn new(
        mean: Vector3<f64>,
        scale: Vector3<f64>,
        rotation: [f64; 4],
        opacity: f64,
        color: Vector3<f64>,
    ) -> Self {
        Self {
            mean,
            log_scale: scale.map(f64::ln),
            rotation,
            opacity_logit: logit(opacity),
            color,
        }
    }

    pub fn isotropic(mean: Vector3<f64>, radius: f64, opacity: f64, color: Vector3<f64>) -> Self {
        Self::new(mean, Vector3::repeat(radius), [1.0, 0.0, 0.0, 0.0], opacity, color)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    /// Mean of the three axis lengths; used as the Gaussian's radius.
    pub fn mean_scale(&self) -> f64 {
        self.scale().sum() / 3.0
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn unit_rotation(&self) -> [f64; 4] {
        let [w, x, y, z] = self.rotation;
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if n == 0.0 {
            return [1.0, 0.0, 0.0, 0.0];
        }
        [w / n, x / n, y / n, z / n]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(self.unit_rotation())
    }

    /// `R diag(scale^2) R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let s2 = self.scale().map(|s| s * s);
        r * Matrix3::from_diagonal(&s2) * r.transpose()
    }

    pub fn is_finite(&self) -> bool {
        self.to_params().iter().all(|v| v.is_finite())
    }

    pub fn to_params(&self) -> [f64; PARAMS_PER_GAUSSIAN] {
        let mut p = [0.0; PARAMS_PER_GAUSSIAN];
        p[slots::MEAN].copy_from_slice(self.mean.as_slice());
        p[slots::LOG_SCALE].copy_from_slice(self.log_scale.as_slice());
        p[slots::ROTATION].copy_from_slice(&self.rotation);
        p[slots::OPACITY] = self.opacity_logit;
        p[slots::COLOR].copy_from_slice(self.color.as_slice());
        p
    }

    pub fn from_params(p: &[f64; PARAMS_PER_GAUSSIAN]) -> Self {
        Self {
            mean: Vector3::from_column_slice(&p[slots::MEAN]),
            log_scale: Vector3::from_column_slice(&p[slots::LOG_SCALE]),
            rotation: [p[6], p[7], p[8], p[9]],
            opacity_logit: p[slots::OPACITY],
            color: Vector3::from_column_slice(&p[slots::COLOR]),
        }
    }

    /// Total order over parameter bit patterns, used to break depth ties.
    pub(crate) fn canonical_cmp(&self, other: &Self) -> Ordering {
        let a = self.to_params();
        let b = other.to_params();
        for (x, y) in a.iter().zip(b.iter()) {
            match x.total_cmp(y) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        Ordering::Equal
    }
}

pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls `dL/dR` back to the raw (unnormalized) quaternion.
pub fn quat_matrix_backward(raw: [f64; 4], d_r: &Matrix3<f64>) -> [f64; 4] {
    let [rw, rx, ry, rz] = raw;
    let norm = (rw * rw + rx * rx + ry * ry + rz * rz).sqrt();
    if norm == 0.0 {
        return [0.0; 4];
    }
    let q = [rw / norm, rx / norm, ry / norm, rz / norm];
    let [w, x, y, z] = q;
    let g = d_r;
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0 * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - w * g[(1, 2)] + z * g[(2, 0)]
        + w * g[(2, 1)])
        - 4.0 * x * (g[(1, 1)] + g[(2, 2)]);
    let dy = 2.0 * (x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
        + z * g[(2, 1)])
        - 4.0 * y * (g[(0, 0)] + g[(2, 2)]);
    let dz = 2.0 * (-w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] + y * g[(1, 2)] + x * g[(2, 0)]
        + y * g[(2, 1)])
        - 4.0 * z * (g[(0, 0)] + g[(1, 1)]);
    let d_unit = [dw, dx, dy, dz];
    // d q_unit / d raw = (I - q q^T) / |raw|
    let dot: f64 = (0..4).map(|k| d_unit[k] * q[k]).sum();
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = (d_unit[k] - dot * q[k]) / norm;
    }
    out
}

/// Ordered collection of Gaussians plus the densification statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian3D>,
    pub step: u64,
    /// Sum of view-space positional gradient norms since the last reset.
    pub grad_accum: Vec<f64>,
    /// Number of views that contributed to `grad_accum`.
    pub grad_count: Vec<u32>,
}

impl GaussianScene {
    pub fn new(gaussians: Vec<Gaussian3D>) -> Self {
        let n = gaussians.len();
        Self {
            gaussians,
            step: 0,
            grad_accum: vec![0.0; n],
            grad_count: vec![0; n],
        }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Average accumulated view-space gradient norm of Gaussian `i`.
    pub fn mean_view_grad(&self, i: usize) -> f64 {
        match self.grad_count[i] {
            0 => 0.0,
            c => self.grad_accum[i] / c as f64,
        }
    }

    pub fn reset_grad_stats(&mut self) {
        self.grad_accum.clear();
        self.grad_accum.resize(self.gaussians.len(), 0.0);
        self.grad_count.clear();
        self.grad_count.resize(self.gaussians.len(), 0);
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.gaussians.iter().position(|g| !g.is_finite()) {
            Some(index) => Err(Error::NonFiniteGaussian { index }),
            None => Ok(()),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        self.gaussians.iter().flat_map(|g| g.to_params()).collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len() * PARAMS_PER_GAUSSIAN);
        for (g, chunk) in self.gaussians.iter_mut().zip(flat.chunks_exact(PARAMS_PER_GAUSSIAN)) {
            *g = Gaussian3D::from_params(chunk.try_into().unwrap());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn opacity_reparameterization_round_trips(p in 1e-6f64..(1.0 - 1e-6)) {
            prop_assert!((sigmoid(logit(p)) - p).abs() <= 1e-12);
        }

        #[test]
        fn scale_reparameterization_round_trips(s in 1e-4f64..1e3) {
            prop_assert!(((s.ln()).exp() - s).abs() <= 1e-12 * s.max(1.0));
        }

        #[test]
        fn stored_quaternion_reads_back_unit(w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            prop_assume!(w * w + x * x + y * y + z * z > 1e-6);
            let g = Gaussian3D { rotation: [w, x, y, z], ..Gaussian3D::isotropic(Vector3::zeros(), 1.0, 0.5, Vector3::zeros()) };
            let q = g.unit_rotation();
            let n: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn covariance_is_positive_semidefinite_for_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let scale = Vector3::new(
                rng.random_range(1e-3..2.0),
                rng.random_range(1e-3..2.0),
                rng.random_range(1e-3..2.0),
            );
            let q = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let g = Gaussian3D::new(Vector3::zeros(), scale, q, 0.5, Vector3::zeros());
            let cov = g.covariance();
            assert!((cov - cov.transpose()).norm() < 1e-12);
            let eig = cov.symmetric_eigenvalues();
            for e in eig.iter() {
                assert!(*e >= -1e-12, "eigenvalue {e}");
            }
        }
    }

    #[test]
    fn rotation_matrix_is_orthonormal() {
        let g = Gaussian3D {
            rotation: [0.3, -1.2, 0.5, 0.8],
            ..Gaussian3D::isotropic(Vector3::zeros(), 1.0, 0.5, Vector3::zeros())
        };
        let r = g.rotation_matrix();
        assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quaternion_backward_matches_finite_differences() {
        let raw = [0.9, -0.3, 0.4, 0.2];
        let weights = Matrix3::new(0.3, -1.0, 0.2, 0.7, 0.1, -0.4, 0.5, 0.9, -0.6);
        let f = |q: [f64; 4]| {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            let r = quat_to_matrix([q[0] / n, q[1] / n, q[2] / n, q[3] / n]);
            r.component_mul(&weights).sum()
        };
        let analytic = quat_matrix_backward(raw, &weights);
        for k in 0..4 {
            let h = 1e-6;
            let mut a = raw;
            let mut b = raw;
            a[k] += h;
            b[k] -= h;
            let fd = (f(a) - f(b)) / (2.0 * h);
            assert!((fd - analytic[k]).abs() < 1e-8, "k={k}: {fd} vs {}", analytic[k]);
        }
    }

    #[test]
    fn flat_params_round_trip() {
        let g = Gaussian3D::new(
            Vector3::new(0.1, 0.2, 0.3),
            Vector3::new(0.5, 0.25, 0.125),
            [0.5, 0.5, 0.5, 0.5],
            0.3,
            Vector3::new(0.9, 0.1, 0.4),
        );
        assert_eq!(Gaussian3D::from_params(&g.to_params()), g);
    }
}
