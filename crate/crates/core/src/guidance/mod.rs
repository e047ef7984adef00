//! Noise schedule, score oracles and the score-distillation gradients.

pub mod oracle;
pub mod schedule;
pub mod score;
pub mod surrogate;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use oracle::{
    normal_image, DiffusionSample, GuidanceCondition, NoiseEchoOracle, OracleContext, OracleRegistry,
    ReferenceScoreOracle, ScoreOracle, ZeroOracle,
};
pub use schedule::NoiseSchedule;
pub use score::{
    guidance_residual, lora_lambda, lora_lambda_with, pointcloud_prior_gradient, prior_gradient_with_noise,
    sds_gradient, vsd_control_gradient, PixelGuidance, PriorGradient,
};
pub use surrogate::{
    surrogate_train_step, time_embedding, NoiseSurrogate, SurrogateConfig, SurrogateExample, TrainItem,
};

/// Upper bound on the control-variate weight.
pub const LORA_LAMBDA_MAX: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub schedule: NoiseSchedule,
    /// Global multiplier on the score-distillation residual.
    pub guidance_scale: f64,
    /// Weight of the point-cloud prior.
    pub lambda_p: f64,
    /// Weight of the moment loss.
    pub lambda_m: f64,
    /// Plateau of the control-variate weight.
    pub lora_max: f64,
    pub lora_ramp_steps: u64,
    /// Image oracle, looked up in the [`OracleRegistry`].
    pub oracle: String,
    pub surrogate: SurrogateConfig,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            schedule: NoiseSchedule::default(),
            guidance_scale: 1.0,
            lambda_p: 1.0,
            lambda_m: 100.0,
            lora_max: LORA_LAMBDA_MAX,
            lora_ramp_steps: 5000,
            oracle: "reference".into(),
            surrogate: SurrogateConfig::default(),
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.surrogate.validate()?;
        if !(self.lambda_p >= 0.0 && self.lambda_p.is_finite()) {
            return Err(Error::config("lambda_p must be finite and non-negative"));
        }
        if !(self.lambda_m >= 0.0 && self.lambda_m.is_finite()) {
            return Err(Error::config("lambda_m must be finite and non-negative"));
        }
        if !(0.0..=LORA_LAMBDA_MAX).contains(&self.lora_max) {
            return Err(Error::config(format!("lora_max must lie in [0, {LORA_LAMBDA_MAX}]")));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::config("guidance_scale must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn lora_lambda(&self, step: u64) -> f64 {
        lora_lambda_with(step, self.lora_max, self.lora_ramp_steps)
    }
}
