//! Score-distillation gradients.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;

use super::oracle::{DiffusionSample, GuidanceCondition, ScoreOracle};
use super::GuidanceConfig;
use crate::error::{Error, Result};
use crate::render::{backward_from_trace, render_with_trace, RenderGradients, RenderSettings, RgbImage};
use crate::scene::{GaussianScene, PromptEmbedding, ReferenceAsset};

/// Pixel-space guidance for one render.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGuidance {
    pub t: u32,
    /// `guidance_scale * omega(t)`.
    pub weight: f64,
    pub residual: RgbImage,
    /// `weight * residual`.
    pub grad: RgbImage,
}

impl PixelGuidance {
    /// Weighted mean squared residual, reported as the control loss.
    pub fn loss(&self) -> f64 {
        let n = self.residual.data.len().max(1) as f64;
        self.weight * self.residual.data.iter().map(|r| r * r).sum::<f64>() / n
    }
}

/// Residual `(eps_phi - eps) - lambda * (eps_theta - eps)` at a sampled
/// timestep, drawn in the order timestep then noise. With `lambda = 0` the
/// control oracle is never evaluated.
pub fn guidance_residual<R: Rng + ?Sized>(
    render: &RgbImage,
    cond: &GuidanceCondition,
    oracle: &dyn ScoreOracle,
    control: Option<(&dyn ScoreOracle, f64)>,
    y: &PromptEmbedding,
    cfg: &GuidanceConfig,
    rng: &mut R,
) -> Result<PixelGuidance> {
    let sample = DiffusionSample::draw(render.clone(), &cfg.schedule, rng)?;
    let mut residual = oracle.residual(&sample, cond, y)?;
    residual.check_shape(render, "oracle residual")?;
    if let Some((theta, lambda)) = control {
        if lambda != 0.0 {
            let r_theta = theta.residual(&sample, cond, y)?;
            r_theta.check_shape(render, "control residual")?;
            residual = residual.axpby(1.0, &r_theta, -lambda);
        }
    }
    let weight = cfg.guidance_scale * cfg.schedule.omega(sample.t);
    Ok(PixelGuidance {
        t: sample.t,
        weight,
        grad: residual.scaled(weight),
        residual,
    })
}

/// Score-distillation gradient of one view.
#[allow(clippy::too_many_arguments)]
pub fn sds_gradient<R: Rng + ?Sized>(
    scene: &GaussianScene,
    cond: &GuidanceCondition,
    background: [f64; 3],
    settings: &RenderSettings,
    oracle: &dyn ScoreOracle,
    y: &PromptEmbedding,
    cfg: &GuidanceConfig,
    rng: &mut R,
) -> Result<RenderGradients> {
    let (img, trace) = render_with_trace(scene, &cond.camera, background, settings)?;
    let g = guidance_residual(&img.rgb, cond, oracle, None, y, cfg, rng)?;
    backward_from_trace(scene, &trace, &g.grad)
}

/// Control-variate score distillation: the residual of `oracle` minus
/// `lambda_lora` times the residual of `surrogate`. The condition is expected
/// to carry the reference depth at the camera.
#[allow(clippy::too_many_arguments)]
pub fn vsd_control_gradient<R: Rng + ?Sized>(
    scene: &GaussianScene,
    cond: &GuidanceCondition,
    background: [f64; 3],
    settings: &RenderSettings,
    oracle: &dyn ScoreOracle,
    surrogate: &dyn ScoreOracle,
    lambda_lora: f64,
    y: &PromptEmbedding,
    cfg: &GuidanceConfig,
    rng: &mut R,
) -> Result<RenderGradients> {
    let (img, trace) = render_with_trace(scene, &cond.camera, background, settings)?;
    let g = guidance_residual(&img.rgb, cond, oracle, Some((surrogate, lambda_lora)), y, cfg, rng)?;
    backward_from_trace(scene, &trace, &g.grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorGradient {
    /// Sampled timestep, `None` when the prior is switched off.
    pub t: Option<u32>,
    pub mean: Vec<Vector3<f64>>,
}

/// Point-cloud prior on the Gaussian means. Draws the timestep, then three
/// noise values per Gaussian in index order; draws nothing when `lambda_p = 0`.
pub fn pointcloud_prior_gradient<R: Rng + ?Sized>(
    scene: &GaussianScene,
    asset: &ReferenceAsset,
    cfg: &GuidanceConfig,
    rng: &mut R,
) -> Result<PriorGradient> {
    if asset.points.is_empty() {
        return Err(Error::config("point prior needs a non-empty reference point cloud"));
    }
    if cfg.lambda_p == 0.0 || scene.is_empty() {
        return Ok(PriorGradient {
            t: None,
            mean: vec![Vector3::zeros(); scene.len()],
        });
    }
    let t = cfg.schedule.sample_t(rng);
    let eps: Vec<Vector3<f64>> = (0..scene.len())
        .map(|_| Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    prior_gradient_with_noise(scene, asset, t, &eps, cfg)
}

/// The prior gradient for a given timestep and per-Gaussian noise.
pub fn prior_gradient_with_noise(
    scene: &GaussianScene,
    asset: &ReferenceAsset,
    t: u32,
    eps: &[Vector3<f64>],
    cfg: &GuidanceConfig,
) -> Result<PriorGradient> {
    if asset.points.is_empty() {
        return Err(Error::config("point prior needs a non-empty reference point cloud"));
    }
    if eps.len() != scene.len() {
        return Err(Error::contract("prior noise must have one entry per Gaussian"));
    }
    let (alpha, sigma) = cfg.schedule.coefficients(t)?;
    let k = cfg.lambda_p * cfg.schedule.omega_p(t) * alpha / sigma;
    let tree = asset.tree();
    let mean = scene
        .gaussians
        .iter()
        .zip(eps)
        .map(|(g, e)| {
            let noisy = alpha * g.mean + sigma * e;
            let (j, _) = tree.nearest(&noisy).expect("non-empty tree");
            k * (g.mean - tree.points()[j])
        })
        .collect();
    Ok(PriorGradient { t: Some(t), mean })
}

/// Half-cosine ramp from 0 to `max` over `ramp_steps`, constant afterwards.
pub fn lora_lambda_with(step: u64, max: f64, ramp_steps: u64) -> f64 {
    if ramp_steps == 0 {
        return max;
    }
    let s = step.min(ramp_steps) as f64 / ramp_steps as f64;
    max * (1.0 - (std::f64::consts::PI * s).cos()) / 2.0
}

pub fn lora_lambda(step: u64) -> f64 {
    lora_lambda_with(step, 0.75, 5000)
}
