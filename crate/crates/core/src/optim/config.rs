use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::moments::stack::DgmConfig;
use crate::render::RenderSettings;
use crate::scene::CameraSampler;

/// Adam step sizes per parameter group. The mean rate decays log-linearly
/// from `mean` to `mean_final` over the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub mean: f64,
    pub mean_final: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            mean: 1.6e-4,
            mean_final: 1.6e-6,
            scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            color: 2.5e-3,
        }
    }
}

impl LearningRates {
    pub fn validate(&self) -> Result<()> {
        let all = [self.mean, self.mean_final, self.scale, self.rotation, self.opacity, self.color];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config("learning rates must be finite and non-negative"));
        }
        if (self.mean == 0.0) != (self.mean_final == 0.0) {
            return Err(Error::config("mean learning rate and its final value must both be zero or both positive"));
        }
        Ok(())
    }

    /// Mean rate at `progress` in [0, 1].
    pub fn mean_at(&self, progress: f64) -> f64 {
        if self.mean == 0.0 {
            return 0.0;
        }
        let p = progress.clamp(0.0, 1.0);
        (self.mean.ln() * (1.0 - p) + self.mean_final.ln() * p).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Geometry,
    Texture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub geometry_steps: u64,
    pub texture_steps: u64,
    pub lr: LearningRates,
    pub densify_interval: u64,
    pub densify_threshold: f64,
    pub split_scale_divisor: f64,
    pub compact_interval: u64,
    pub compact_neighbors: usize,
    pub prune_interval: u64,
    pub prune_opacity: f64,
    pub prune_radius: f64,
    pub min_gaussians: usize,
    /// Densification stops adding Gaussians at this count.
    pub max_gaussians: usize,
    pub init_gaussians: usize,
    pub camera: CameraSampler,
    pub background: [f64; 3],
    pub render: RenderSettings,
    pub moments: DgmConfig,
    /// Window of the running loss averages.
    pub average_window: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            geometry_steps: 15_000,
            texture_steps: 15_000,
            lr: LearningRates::default(),
            densify_interval: 500,
            densify_threshold: 0.02,
            split_scale_divisor: 1.6,
            compact_interval: 1000,
            compact_neighbors: 3,
            prune_interval: 500,
            prune_opacity: 0.05,
            prune_radius: 0.05,
            min_gaussians: 16,
            max_gaussians: 100_000,
            init_gaussians: 4096,
            camera: CameraSampler::default(),
            background: [0.0; 3],
            render: RenderSettings::default(),
            moments: DgmConfig::default(),
            average_window: 50,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        self.camera.validate()?;
        self.moments.validate()?;
        for (name, v) in [
            ("densify_interval", self.densify_interval),
            ("compact_interval", self.compact_interval),
            ("prune_interval", self.prune_interval),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("densify_threshold", self.densify_threshold),
            ("prune_opacity", self.prune_opacity),
            ("prune_radius", self.prune_radius),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(self.split_scale_divisor.is_finite() && self.split_scale_divisor > 1.0) {
            return Err(Error::config("split_scale_divisor must exceed 1"));
        }
        if self.compact_neighbors == 0 {
            return Err(Error::config("compact_neighbors must be positive"));
        }
        if self.init_gaussians == 0 {
            return Err(Error::config("init_gaussians must be positive"));
        }
        if self.max_gaussians < self.init_gaussians.max(self.min_gaussians) {
            return Err(Error::config("max_gaussians must cover init_gaussians and min_gaussians"));
        }
        if self.average_window == 0 {
            return Err(Error::config("average_window must be positive"));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::config("background color channels must lie in [0, 1]"));
        }
        let i = self.camera.intrinsics;
        if i.width % 2 != 0 || i.height % 2 != 0 {
            return Err(Error::config("training image sides must be even"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.geometry_steps + self.texture_steps
    }

    /// Stage of 1-based step `step`.
    pub fn stage_of(&self, step: u64) -> Stage {
        if step <= self.geometry_steps {
            Stage::Geometry
        } else {
            Stage::Texture
        }
    }

    /// Step within the texture stage, `None` during geometry.
    pub fn texture_step(&self, step: u64) -> Option<u64> {
        (step > self.geometry_steps).then(|| step - self.geometry_steps)
    }

    fn due(&self, step: u64, interval: u64) -> bool {
        match self.texture_step(step) {
            Some(k) => k % interval == 0 && k < self.texture_steps,
            None => false,
        }
    }

    pub fn split_due(&self, step: u64) -> bool {
        self.due(step, self.densify_interval)
    }

    pub fn compact_due(&self, step: u64) -> bool {
        self.due(step, self.compact_interval)
    }

    pub fn prune_due(&self, step: u64) -> bool {
        self.due(step, self.prune_interval)
    }
}

/// Everything one training run needs apart from the asset and the prompt.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub stage: StageConfig,
    pub guidance: GuidanceConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.stage.validate()?;
        self.guidance.validate()
    }
}
