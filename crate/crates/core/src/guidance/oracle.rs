//! Noise predictors used as guidance.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::render::{ReferenceRenderer, RgbImage};
use crate::scene::{CameraPose, PromptEmbedding};

/// Image filled with independent standard normal draws, row-major RGB.
pub fn normal_image<R: Rng + ?Sized>(width: usize, height: usize, rng: &mut R) -> RgbImage {
    let data = (0..3 * width * height).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    RgbImage { width, height, data }
}

/// A clean image, its noise and the noised mix at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSample {
    pub clean: RgbImage,
    pub noise: RgbImage,
    pub t: u32,
    pub alpha: f64,
    pub sigma: f64,
    /// `alpha * clean + sigma * noise`.
    pub noisy: RgbImage,
}

impl DiffusionSample {
    pub fn new(clean: RgbImage, noise: RgbImage, t: u32, schedule: &NoiseSchedule) -> Result<Self> {
        clean.check_shape(&noise, "diffusion noise")?;
        let (alpha, sigma) = schedule.coefficients(t)?;
        let noisy = clean.axpby(alpha, &noise, sigma);
        Ok(Self {
            clean,
            noise,
            t,
            alpha,
            sigma,
            noisy,
        })
    }

    /// Draws the timestep, then the noise.
    pub fn draw<R: Rng + ?Sized>(clean: RgbImage, schedule: &NoiseSchedule, rng: &mut R) -> Result<Self> {
        let t = schedule.sample_t(rng);
        Self::at(clean, t, schedule, rng)
    }

    /// Fresh noise at a fixed timestep.
    pub fn at<R: Rng + ?Sized>(clean: RgbImage, t: u32, schedule: &NoiseSchedule, rng: &mut R) -> Result<Self> {
        let noise = normal_image(clean.width, clean.height, rng);
        Self::new(clean, noise, t, schedule)
    }
}

/// What a guidance oracle is conditioned on besides the noisy image.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceCondition {
    pub camera: CameraPose,
    /// Normalized depth map of the reference at `camera`, near at 1.
    pub depth: Option<Vec<f64>>,
}

impl GuidanceCondition {
    pub fn camera_only(camera: CameraPose) -> Self {
        Self { camera, depth: None }
    }

    /// Depth condition rendered from the reference asset.
    pub fn from_reference(reference: &ReferenceRenderer, camera: &CameraPose) -> Result<Self> {
        let img = reference.render(camera)?;
        Ok(Self {
            camera: *camera,
            depth: Some(img.normalized_depth()),
        })
    }
}

pub trait ScoreOracle: Send + Sync {
    fn name(&self) -> &str;

    /// Predicted noise for `sample.noisy`; same shape as the input.
    fn predict(&self, sample: &DiffusionSample, cond: &GuidanceCondition, y: &PromptEmbedding) -> Result<RgbImage>;

    /// Predicted minus true noise.
    fn residual(&self, sample: &DiffusionSample, cond: &GuidanceCondition, y: &PromptEmbedding) -> Result<RgbImage> {
        let eps = self.predict(sample, cond, y)?;
        eps.check_shape(&sample.noise, "oracle prediction")?;
        Ok(eps.axpby(1.0, &sample.noise, -1.0))
    }
}

/// Predicts the noise that would turn the reference view into the noisy image.
#[derive(Debug, Clone)]
pub struct ReferenceScoreOracle {
    reference: Arc<ReferenceRenderer>,
}

impl ReferenceScoreOracle {
    pub fn new(reference: Arc<ReferenceRenderer>) -> Self {
        Self { reference }
    }

    fn reference_view(&self, sample: &DiffusionSample, cond: &GuidanceCondition) -> Result<RgbImage> {
        if !(sample.sigma > 0.0) {
            return Err(Error::invalid(format!("timestep {} has zero noise", sample.t)));
        }
        let img = self.reference.render(&cond.camera)?;
        img.rgb.check_shape(&sample.noisy, "reference view")?;
        Ok(img.rgb.clone())
    }
}

impl ScoreOracle for ReferenceScoreOracle {
    fn name(&self) -> &str {
        "reference"
    }

    fn predict(&self, sample: &DiffusionSample, cond: &GuidanceCondition, _y: &PromptEmbedding) -> Result<RgbImage> {
        let x_ref = self.reference_view(sample, cond)?;
        let inv = 1.0 / sample.sigma;
        Ok(sample.noisy.axpby(inv, &x_ref, -sample.alpha * inv))
    }

    /// Closed form of the residual, free of the cancellation in `predict - noise`.
    fn residual(&self, sample: &DiffusionSample, cond: &GuidanceCondition, _y: &PromptEmbedding) -> Result<RgbImage> {
        let x_ref = self.reference_view(sample, cond)?;
        let k = sample.alpha / sample.sigma;
        let data = sample
            .clean
            .data
            .iter()
            .zip(&x_ref.data)
            .map(|(x, r)| k * (x - r))
            .collect();
        Ok(RgbImage {
            width: x_ref.width,
            height: x_ref.height,
            data,
        })
    }
}

/// Returns the true noise, so the residual is always zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoiseEchoOracle;

impl ScoreOracle for NoiseEchoOracle {
    fn name(&self) -> &str {
        "noise-echo"
    }

    fn predict(&self, sample: &DiffusionSample, _cond: &GuidanceCondition, _y: &PromptEmbedding) -> Result<RgbImage> {
        Ok(sample.noise.clone())
    }
}

/// Always predicts zero noise.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroOracle;

impl ScoreOracle for ZeroOracle {
    fn name(&self) -> &str {
        "zero"
    }

    fn predict(&self, sample: &DiffusionSample, _cond: &GuidanceCondition, _y: &PromptEmbedding) -> Result<RgbImage> {
        Ok(RgbImage::new(sample.noisy.width, sample.noisy.height))
    }
}

/// Inputs an oracle factory may draw on.
#[derive(Debug, Clone, Default)]
pub struct OracleContext {
    pub reference: Option<Arc<ReferenceRenderer>>,
}

pub type OracleFactory = fn(&OracleContext) -> Result<Arc<dyn ScoreOracle>>;

/// Oracles by name.
#[derive(Clone)]
pub struct OracleRegistry {
    factories: BTreeMap<&'static str, OracleFactory>,
}

impl OracleRegistry {
    pub fn builtin() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register("reference", |ctx| {
            let reference = ctx
                .reference
                .clone()
                .ok_or_else(|| Error::config("the reference oracle needs a reference asset"))?;
            Ok(Arc::new(ReferenceScoreOracle::new(reference)))
        });
        r.register("noise-echo", |_| Ok(Arc::new(NoiseEchoOracle)));
        r.register("zero", |_| Ok(Arc::new(ZeroOracle)));
        r
    }

    pub fn register(&mut self, name: &'static str, factory: OracleFactory) {
        self.factories.insert(name, factory);
    }

    pub fn create(&self, name: &str, ctx: &OracleContext) -> Result<Arc<dyn ScoreOracle>> {
        let factory = self.factories.get(name).ok_or_else(|| {
            Error::config(format!(
                "unknown score oracle {name:?}; known: {}",
                self.names().join(", ")
            ))
        })?;
        factory(ctx)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }
}

impl std::fmt::Debug for OracleRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}
