use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance-preserving cosine schedule over integer timesteps `0..=T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSchedule {
    pub timesteps: u32,
    /// Offset of the cosine schedule.
    pub offset: f64,
    /// Sampling range as fractions of `timesteps`.
    pub t_min_frac: f64,
    pub t_max_frac: f64,
    /// `omega(t) = weight_scale * sigma_t^2`.
    pub weight_scale: f64,
    /// `omega_p(t) = prior_weight_scale * sigma_t^2`.
    pub prior_weight_scale: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            offset: 0.008,
            t_min_frac: 0.02,
            t_max_frac: 0.98,
            weight_scale: 1.0,
            prior_weight_scale: 1.0,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 {
            return Err(Error::config("schedule needs at least one timestep"));
        }
        if !(0.0 <= self.t_min_frac && self.t_min_frac <= self.t_max_frac && self.t_max_frac <= 1.0) {
            return Err(Error::config("timestep sampling range must satisfy 0 <= min <= max <= 1"));
        }
        if self.t_min() == 0 {
            return Err(Error::config("timestep sampling range must exclude t = 0"));
        }
        if !(self.offset > 0.0) || !(self.weight_scale >= 0.0) || !(self.prior_weight_scale >= 0.0) {
            return Err(Error::config("schedule offset must be positive and weight scales non-negative"));
        }
        Ok(())
    }

    pub fn t_min(&self) -> u32 {
        (self.t_min_frac * self.timesteps as f64).round() as u32
    }

    pub fn t_max(&self) -> u32 {
        (self.t_max_frac * self.timesteps as f64).round() as u32
    }

    fn f(&self, t: u32) -> f64 {
        let tau = t as f64 / self.timesteps as f64;
        ((tau + self.offset) / (1.0 + self.offset) * std::f64::consts::FRAC_PI_2).cos().powi(2)
    }

    /// Signal coefficient.
    pub fn alpha(&self, t: u32) -> f64 {
        (self.f(t.min(self.timesteps)) / self.f(0)).clamp(0.0, 1.0).sqrt()
    }

    /// Noise coefficient, `sqrt(1 - alpha^2)`.
    pub fn sigma(&self, t: u32) -> f64 {
        let a = self.alpha(t);
        (1.0 - a * a).max(0.0).sqrt()
    }

    pub fn omega(&self, t: u32) -> f64 {
        self.weight_scale * self.sigma(t).powi(2)
    }

    pub fn omega_p(&self, t: u32) -> f64 {
        self.prior_weight_scale * self.sigma(t).powi(2)
    }

    /// Uniform integer timestep in the sampling range.
    pub fn sample_t<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        rng.random_range(self.t_min()..=self.t_max())
    }

    /// `(alpha, sigma)` at `t`, rejecting the noiseless endpoint.
    pub fn coefficients(&self, t: u32) -> Result<(f64, f64)> {
        let sigma = self.sigma(t);
        if t == 0 || t > self.timesteps || !(sigma > 0.0) {
            return Err(Error::invalid(format!(
                "timestep {t} is outside (0, {}] or has zero noise",
                self.timesteps
            )));
        }
        Ok((self.alpha(t), sigma))
    }
}
