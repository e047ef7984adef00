use std::collections::VecDeque;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{
    guidance_residual, pointcloud_prior_gradient, surrogate_train_step, GuidanceCondition, NoiseSurrogate,
    OracleContext, OracleRegistry, PixelGuidance, PriorGradient, ScoreOracle, TrainItem,
};
use crate::io::{load_asset, ply, PlyFormat};
use crate::moments::stack::moment_loss;
use crate::render::{backward_from_trace, render_with_trace, ReferenceRenderer, RenderTrace, RenderedImage, RgbImage};
use crate::retrieval::{retrieve, Catalog, Retrieval};
use crate::scene::gaussian::PARAMS_PER_GAUSSIAN;
use crate::scene::{init_from_pointcloud, view_prompt, CameraPose, GaussianScene, ReferenceAsset};

use super::adam::{Adam, ByteReader};
use super::config::{Stage, TrainConfig};
use super::densify::{densify_compact, densify_split, prune};

const STATE_MAGIC: &[u8; 4] = b"GMOP";
const STATE_VERSION: u32 = 1;
const SURROGATE_STREAM: u64 = 1;

pub const SCENE_FILE: &str = "scene.ply";
pub const SURROGATE_FILE: &str = "surrogate.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";

/// Mean over the most recent `window` values.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningMean {
    window: usize,
    values: VecDeque<f64>,
}

impl RunningMean {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            values: VecDeque::new(),
        }
    }

    pub fn push(&mut self, v: f64) {
        if self.values.len() == self.window {
            self.values.pop_front();
        }
        self.values.push_back(v);
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.window as u64).to_le_bytes());
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        let window = r.u64()? as usize;
        let n = r.u64()? as usize;
        if window == 0 || n > window {
            return Err(Error::invalid("optimizer state has a malformed running average"));
        }
        Ok(Self {
            window,
            values: r.f64s(n)?.into(),
        })
    }
}

/// Trailing moving average, averaging fewer values near the start.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let mut avg = RunningMean::new(window);
    values
        .iter()
        .map(|&v| {
            avg.push(v);
            avg.mean()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub scene: GaussianScene,
    pub surrogate: NoiseSurrogate,
    pub adam: Adam,
    /// Completed steps.
    pub step: u64,
    pub control_avg: RunningMean,
    pub moment_avg: RunningMean,
    pub total_avg: RunningMean,
    /// Cameras, guidance noise, prior noise and split samples.
    pub rng: ChaCha8Rng,
    /// Surrogate training draws.
    pub surrogate_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: &TrainConfig, asset: &ReferenceAsset) -> Result<Self> {
        let scene = init_from_pointcloud(asset, config.stage.init_gaussians)?;
        let surrogate = NoiseSurrogate::new(config.guidance.surrogate.clone(), config.guidance.schedule.timesteps)?;
        let mut surrogate_rng = ChaCha8Rng::seed_from_u64(config.seed);
        surrogate_rng.set_stream(SURROGATE_STREAM);
        let w = config.stage.average_window;
        Ok(Self {
            adam: Adam::new(scene.len() * PARAMS_PER_GAUSSIAN),
            scene,
            surrogate,
            step: 0,
            control_avg: RunningMean::new(w),
            moment_avg: RunningMean::new(w),
            total_avg: RunningMean::new(w),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            surrogate_rng,
        })
    }

    /// Optimizer moments, counters, averages and both random streams.
    pub fn optimizer_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        out.extend_from_slice(&STATE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        self.adam.write_bytes(&mut out);
        for avg in [&self.control_avg, &self.moment_avg, &self.total_avg] {
            avg.write(&mut out);
        }
        for rng in [&self.rng, &self.surrogate_rng] {
            out.extend_from_slice(&rng.get_seed());
            out.extend_from_slice(&rng.get_stream().to_le_bytes());
            out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        ply::write_scene(&self.scene, &dir.join(SCENE_FILE), PlyFormat::BinaryLittleEndian)?;
        self.surrogate.save(&dir.join(SURROGATE_FILE))?;
        let path = dir.join(OPTIMIZER_FILE);
        std::fs::write(&path, self.optimizer_bytes()).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let scene = ply::read_scene(&dir.join(SCENE_FILE))?;
        let surrogate = NoiseSurrogate::load(&dir.join(SURROGATE_FILE))?;
        let path = dir.join(OPTIMIZER_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut r = ByteReader::new(&bytes, "optimizer state");
        if r.take(4)? != STATE_MAGIC {
            return Err(Error::invalid("not an optimizer state file"));
        }
        let version = r.u32()?;
        if version != STATE_VERSION {
            return Err(Error::invalid(format!("unsupported optimizer state version {version}")));
        }
        let step = r.u64()?;
        let adam = Adam::read_bytes(&mut r)?;
        let control_avg = RunningMean::read(&mut r)?;
        let moment_avg = RunningMean::read(&mut r)?;
        let total_avg = RunningMean::read(&mut r)?;
        let mut rngs = Vec::with_capacity(2);
        for _ in 0..2 {
            let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
            let mut rng = ChaCha8Rng::from_seed(seed);
            rng.set_stream(stream);
            rng.set_word_pos(word_pos);
            rngs.push(rng);
        }
        r.finish()?;
        if scene.step != step {
            return Err(Error::invalid(format!(
                "checkpoint scene is at step {} but the optimizer state is at step {step}",
                scene.step
            )));
        }
        if adam.len() != scene.len() * PARAMS_PER_GAUSSIAN {
            return Err(Error::invalid("optimizer moments do not match the checkpoint scene"));
        }
        let surrogate_rng = rngs.pop().unwrap();
        let rng = rngs.pop().unwrap();
        Ok(Self {
            scene,
            surrogate,
            adam,
            step,
            control_avg,
            moment_avg,
            total_avg,
            rng,
            surrogate_rng,
        })
    }
}

/// Per-step metrics, one line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: Stage,
    pub t: u32,
    pub control_loss: f64,
    pub moment_loss: f64,
    pub total_loss: f64,
    pub control_avg: f64,
    pub moment_avg: f64,
    pub total_avg: f64,
    pub lambda_lora: f64,
    pub surrogate_loss: f64,
    pub lr_mean: f64,
    pub gaussians: usize,
    pub split: usize,
    pub compacted: usize,
    pub pruned: usize,
}

/// Everything computed before the backward pass of one step.
#[derive(Debug, Clone)]
pub struct StepForward {
    pub camera: CameraPose,
    pub render: RenderedImage,
    pub trace: RenderTrace,
    pub reference: Arc<RenderedImage>,
    pub condition: GuidanceCondition,
    pub lambda_lora: f64,
    pub guidance: PixelGuidance,
    pub prior: PriorGradient,
    pub moment_loss: f64,
    pub moment_grad: RgbImage,
    /// `guidance.grad + lambda_m * moment_grad`.
    pub pixel_grad: RgbImage,
}

#[derive(Clone)]
pub struct Trainer {
    config: TrainConfig,
    prompt: String,
    asset: Arc<ReferenceAsset>,
    reference: Arc<ReferenceRenderer>,
    oracle: Arc<dyn ScoreOracle>,
    pub state: TrainState,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("prompt", &self.prompt)
            .field("oracle", &self.oracle.name())
            .field("step", &self.state.step)
            .finish()
    }
}

impl Trainer {
    pub fn new(config: TrainConfig, asset: Arc<ReferenceAsset>, prompt: &str) -> Result<Self> {
        let state = TrainState::new(&config, &asset)?;
        Self::with_state(config, asset, prompt, state, &OracleRegistry::builtin())
    }

    pub fn resume(config: TrainConfig, asset: Arc<ReferenceAsset>, prompt: &str, dir: &Path) -> Result<Self> {
        let state = TrainState::load(dir)?;
        Self::with_state(config, asset, prompt, state, &OracleRegistry::builtin())
    }

    pub fn with_state(
        config: TrainConfig,
        asset: Arc<ReferenceAsset>,
        prompt: &str,
        state: TrainState,
        registry: &OracleRegistry,
    ) -> Result<Self> {
        config.validate()?;
        if prompt.trim().is_empty() {
            return Err(Error::config("prompt is empty"));
        }
        if state.surrogate.config != config.guidance.surrogate {
            return Err(Error::config("surrogate settings differ from the checkpoint"));
        }
        let reference = Arc::new(ReferenceRenderer::new(
            asset.clone(),
            config.stage.background,
            config.stage.render,
        ));
        let oracle = registry.create(
            &config.guidance.oracle,
            &OracleContext {
                reference: Some(reference.clone()),
            },
        )?;
        Ok(Self {
            config,
            prompt: prompt.to_string(),
            asset,
            reference,
            oracle,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn asset(&self) -> &Arc<ReferenceAsset> {
        &self.asset
    }

    pub fn reference(&self) -> &Arc<ReferenceRenderer> {
        &self.reference
    }

    pub fn prompt(&self) -> &str {
        &self.prompt
    }

    pub fn total_steps(&self) -> u64 {
        self.config.stage.total_steps()
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    /// Mean learning rate for 1-based step `step`.
    pub fn mean_lr(&self, step: u64) -> f64 {
        let total = self.total_steps().max(2);
        let progress = (step.saturating_sub(1)) as f64 / (total - 1) as f64;
        self.config.stage.lr.mean_at(progress)
    }

    /// Samples a view and assembles the pixel gradient. Advances the main
    /// random stream and nothing else.
    pub fn forward(&mut self) -> Result<StepForward> {
        let cfg = &self.config;
        let step = self.state.step + 1;
        let rng = &mut self.state.rng;
        let camera = cfg.stage.camera.sample(rng)?;
        let y = view_prompt(&self.prompt, &camera)?;
        let (render, trace) =
            render_with_trace(&self.state.scene, &camera, cfg.stage.background, &cfg.stage.render)?;
        let reference = self.reference.render(&camera)?;
        let condition = GuidanceCondition {
            camera,
            depth: Some(reference.normalized_depth()),
        };
        let lambda_lora = cfg.guidance.lora_lambda(step - 1);
        let control: Option<(&dyn ScoreOracle, f64)> = Some((&self.state.surrogate, lambda_lora));
        let guidance = guidance_residual(&render.rgb, &condition, self.oracle.as_ref(), control, &y, &cfg.guidance, rng)?;
        let prior = pointcloud_prior_gradient(&self.state.scene, &self.asset, &cfg.guidance, rng)?;
        let lambda_m = cfg.guidance.lambda_m;
        let (moment_loss, moment_grad, pixel_grad) = if lambda_m == 0.0 {
            (0.0, RgbImage::new(render.width(), render.height()), guidance.grad.clone())
        } else {
            let (l, g) = moment_loss(&render, &reference, &cfg.stage.moments)?;
            let sum = guidance.grad.axpby(1.0, &g, lambda_m);
            (l, g, sum)
        };
        Ok(StepForward {
            camera,
            render,
            trace,
            reference,
            condition,
            lambda_lora,
            guidance,
            prior,
            moment_loss,
            moment_grad,
            pixel_grad,
        })
    }

    /// One optimization step. On error the state is left as it was before
    /// the step, apart from the main random stream.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.state.step + 1;
        let stage_cfg = self.config.stage.clone();
        let stage = stage_cfg.stage_of(step);
        if step == stage_cfg.geometry_steps + 1 {
            self.state.scene.reset_grad_stats();
        }
        let fwd = self.forward()?;
        let control_loss = fwd.guidance.loss();
        let lambda_m = self.config.guidance.lambda_m;
        let total_loss = control_loss + lambda_m * fwd.moment_loss;
        let abort = |detail: String| Error::NonFinite { step, detail };
        if !total_loss.is_finite() {
            return Err(abort(format!(
                "loss is not finite (control {control_loss}, moment {})",
                fwd.moment_loss
            )));
        }

        let mut grads = backward_from_trace(&self.state.scene, &fwd.trace, &fwd.pixel_grad)?;
        for (g, p) in grads.mean.iter_mut().zip(&fwd.prior.mean) {
            *g += p;
        }
        if !grads.is_finite() {
            return Err(abort("scene gradient is not finite".into()));
        }

        let mut params = self.state.scene.params();
        let mut adam = self.state.adam.clone();
        let lr = stage_cfg.lr;
        let lr_mean = self.mean_lr(step);
        adam.step_by(&mut params, &grads.to_flat(), |i| match i % PARAMS_PER_GAUSSIAN {
            0..=2 => lr_mean,
            3..=5 => lr.scale,
            6..=9 => lr.rotation,
            10 => lr.opacity,
            _ => lr.color,
        });
        let mut scene = self.state.scene.clone();
        scene.set_params(&params);
        for g in &mut scene.gaussians {
            g.color = g.color.map(|c| c.clamp(0.0, 1.0));
        }
        if let Err(e) = scene.check_finite() {
            return Err(abort(e.to_string()));
        }

        let mut surrogate = self.state.surrogate.clone();
        let mut surrogate_rng = self.state.surrogate_rng.clone();
        let item = TrainItem {
            render: &fwd.render.rgb,
            depth: fwd.condition.depth.as_deref(),
        };
        let surrogate_loss = match surrogate_train_step(&mut surrogate, &[item], &self.config.guidance.schedule, &mut surrogate_rng) {
            Err(e) if e.is_numerical() => return Err(abort(e.to_string())),
            other => other?,
        };

        grads.accumulate_into(&mut scene);
        scene.step = step;
        let mut record_edit = (0, 0, 0);
        if stage_cfg.split_due(step) {
            let before = scene.len();
            let edit = densify_split(
                &mut scene,
                stage_cfg.densify_threshold,
                stage_cfg.split_scale_divisor,
                stage_cfg.max_gaussians,
                &mut self.state.rng,
            );
            edit.apply_to(&mut adam);
            record_edit.0 = edit.removed();
            debug_assert_eq!(scene.len(), before + edit.removed());
        }
        if stage_cfg.compact_due(step) {
            let edit = densify_compact(&mut scene, stage_cfg.compact_neighbors, stage_cfg.max_gaussians);
            edit.apply_to(&mut adam);
            record_edit.1 = edit.added;
        }
        if stage_cfg.prune_due(step) {
            let edit = prune(&mut scene, stage_cfg.prune_opacity, stage_cfg.prune_radius, stage_cfg.min_gaussians);
            edit.apply_to(&mut adam);
            record_edit.2 = edit.removed();
        }

        let st = &mut self.state;
        st.scene = scene;
        st.adam = adam;
        st.surrogate = surrogate;
        st.surrogate_rng = surrogate_rng;
        st.step = step;
        st.control_avg.push(control_loss);
        st.moment_avg.push(fwd.moment_loss);
        st.total_avg.push(total_loss);
        Ok(StepRecord {
            step,
            stage,
            t: fwd.guidance.t,
            control_loss,
            moment_loss: fwd.moment_loss,
            total_loss,
            control_avg: st.control_avg.mean(),
            moment_avg: st.moment_avg.mean(),
            total_avg: st.total_avg.mean(),
            lambda_lora: fwd.lambda_lora,
            surrogate_loss,
            lr_mean,
            gaussians: st.scene.len(),
            split: record_edit.0,
            compacted: record_edit.1,
            pruned: record_edit.2,
        })
    }

    /// Steps until `until` (clamped to the run length), calling `observer`
    /// after every step.
    pub fn run_until(
        &mut self,
        until: u64,
        observer: &mut dyn FnMut(&StepRecord, &Trainer) -> Result<()>,
    ) -> Result<()> {
        let until = until.min(self.total_steps());
        while self.state.step < until {
            let record = self.step()?;
            observer(&record, self)?;
        }
        Ok(())
    }

    pub fn run(&mut self, observer: &mut dyn FnMut(&StepRecord, &Trainer) -> Result<()>) -> Result<()> {
        self.run_until(self.total_steps(), observer)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub retrieval: Retrieval,
    pub asset: Arc<ReferenceAsset>,
    pub scene: GaussianScene,
    pub log: Vec<StepRecord>,
}

/// Retrieves the asset for `prompt`, then runs both stages.
pub fn run_pipeline(
    prompt: &str,
    catalog: &Catalog,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&StepRecord, &Trainer) -> Result<()>,
) -> Result<PipelineOutput> {
    config.validate()?;
    let retrieval = retrieve(prompt, catalog)?;
    let entry = &catalog.entries[retrieval.best];
    let asset = Arc::new(load_asset(&entry.asset_path, &entry.caption)?);
    let mut trainer = Trainer::new(config.clone(), asset.clone(), prompt)?;
    let mut log = Vec::with_capacity(trainer.total_steps() as usize);
    trainer.run(&mut |rec, tr| {
        log.push(rec.clone());
        observer(rec, tr)
    })?;
    Ok(PipelineOutput {
        retrieval,
        asset,
        scene: trainer.state.scene,
        log,
    })
}
