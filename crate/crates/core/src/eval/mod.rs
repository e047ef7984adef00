//! Multi-view consistency metrics: silhouette overlap and a Hu-invariant
//! dispersion proxy for multi-faced or collapsing geometry.

pub mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{hu_invariants, GrayImage};
use crate::render::{RenderSettings, RenderedImage, Renderable};
use crate::scene::{CameraPose, Intrinsics};

pub use report::{metrics_report, write_report, CurvePoint, MetricsReport};

/// Default scale of the log compression of Hu invariants.
pub const HU_LOG_EPS: f64 = 1e-4;
/// Floor on the reference dispersion in the proxy ratio.
pub const DISPERSION_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub views: usize,
    pub elevation_deg: f64,
    pub radius: f64,
    /// Azimuth of the first view.
    pub start_azimuth_deg: f64,
    /// Hu magnitudes well below this are treated as zero by the compression.
    pub hu_log_eps: f64,
    pub intrinsics: Intrinsics,
    pub background: [f64; 3],
    pub render: RenderSettings,
    /// Dispersion ratio above which a scene is flagged.
    pub ratio_threshold: f64,
    /// Share of collapsed views above which a scene is flagged.
    pub thin_threshold: f64,
    /// A view collapses when its silhouette area is below this share of the sweep median.
    pub thin_area_fraction: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            views: 8,
            elevation_deg: 15.0,
            radius: 4.0,
            start_azimuth_deg: 0.0,
            hu_log_eps: HU_LOG_EPS,
            intrinsics: Intrinsics::default(),
            background: [0.0; 3],
            render: RenderSettings::default(),
            ratio_threshold: 2.0,
            thin_threshold: 0.25,
            thin_area_fraction: 0.2,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 {
            return Err(Error::config("a sweep needs at least one view"));
        }
        if !(self.radius.is_finite() && self.radius > self.intrinsics.near) {
            return Err(Error::config("sweep radius must exceed the near plane"));
        }
        if !(self.hu_log_eps > 0.0) {
            return Err(Error::config("hu_log_eps must be positive"));
        }
        if !(self.ratio_threshold > 0.0 && self.thin_threshold >= 0.0 && self.thin_area_fraction >= 0.0) {
            return Err(Error::config("janus thresholds must be non-negative"));
        }
        Ok(())
    }

    /// Evenly spaced azimuths at a fixed elevation, looking at the origin.
    pub fn cameras(&self) -> Result<Vec<CameraPose>> {
        self.validate()?;
        let el = self.elevation_deg.to_radians();
        (0..self.views)
            .map(|k| {
                let az = self.start_azimuth_deg.to_radians() + 2.0 * std::f64::consts::PI * k as f64 / self.views as f64;
                CameraPose::orbit(az, el, self.radius, self.intrinsics)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ViewSweep {
    pub cameras: Vec<CameraPose>,
    pub renders: Vec<RenderedImage>,
}

impl ViewSweep {
    pub fn render(target: &(dyn Renderable + Sync), config: &SweepConfig) -> Result<Self> {
        let cameras = config.cameras()?;
        let renders = cameras
            .par_iter()
            .map(|c| target.render_view(c, config.background, &config.render))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cameras, renders })
    }

    pub fn silhouettes(&self) -> Vec<Vec<bool>> {
        self.renders.iter().map(RenderedImage::silhouette).collect()
    }
}

/// Intersection over union; `None` when both masks are empty.
pub fn mask_iou(a: &[bool], b: &[bool]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::contract("masks differ in size"));
    }
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    Ok((union > 0).then(|| inter as f64 / union as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for views where both silhouettes are empty.
    pub per_view: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
    /// Mean over the non-excluded views, `None` if all were excluded.
    pub mean: Option<f64>,
}

pub fn sweep_iou(a: &ViewSweep, b: &ViewSweep) -> Result<IouReport> {
    if a.renders.len() != b.renders.len() {
        return Err(Error::contract("sweeps differ in view count"));
    }
    let per_view = a
        .renders
        .iter()
        .zip(&b.renders)
        .map(|(x, y)| mask_iou(&x.silhouette(), &y.silhouette()))
        .collect::<Result<Vec<_>>>()?;
    let excluded = (0..per_view.len()).filter(|&i| per_view[i].is_none()).collect();
    let vals: Vec<f64> = per_view.iter().flatten().copied().collect();
    let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    Ok(IouReport {
        per_view,
        excluded,
        mean,
    })
}

/// Per-view silhouette IoU between two renderables over the same sweep.
pub fn silhouette_iou(
    a: &(dyn Renderable + Sync),
    b: &(dyn Renderable + Sync),
    config: &SweepConfig,
) -> Result<IouReport> {
    sweep_iou(&ViewSweep::render(a, config)?, &ViewSweep::render(b, config)?)
}

/// Hu invariants of a binary mask; `None` for an empty mask.
pub fn mask_hu(mask: &[bool], width: usize, height: usize) -> Result<Option<[f64; 7]>> {
    if !mask.iter().any(|m| *m) {
        return Ok(None);
    }
    let img = GrayImage::new(width, height, mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?;
    hu_invariants(&img).map(Some)
}

/// `sign(h) * ln(1 + |h| / eps)` per entry. Continuous through zero, so
/// invariants that hover around zero on near-symmetric masks stay small.
pub fn log_compress(hu: &[f64; 7], eps: f64) -> [f64; 7] {
    hu.map(|h| h.signum() * (h.abs() / eps).ln_1p())
}

/// Mean pairwise Euclidean distance; zero for fewer than two vectors.
pub fn dispersion(vectors: &[[f64; 7]]) -> f64 {
    let n = vectors.len();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += vectors[i].iter().zip(&vectors[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        }
    }
    sum / (n * (n - 1) / 2) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepShape {
    /// Log-compressed Hu vectors, `None` for blank views.
    pub hu: Vec<Option<[f64; 7]>>,
    pub areas: Vec<usize>,
    pub dispersion: f64,
    /// Share of views whose silhouette area is below the configured share of the median.
    pub thin_score: f64,
}

pub fn sweep_shape(sweep: &ViewSweep, config: &SweepConfig) -> Result<SweepShape> {
    let (w, h) = (config.intrinsics.width, config.intrinsics.height);
    let masks = sweep.silhouettes();
    let areas: Vec<usize> = masks.iter().map(|m| m.iter().filter(|x| **x).count()).collect();
    if areas.iter().all(|a| *a == 0) {
        return Err(Error::Degenerate("every view of the sweep is blank".into()));
    }
    let hu = masks
        .iter()
        .map(|m| Ok(mask_hu(m, w, h)?.map(|v| log_compress(&v, config.hu_log_eps))))
        .collect::<Result<Vec<_>>>()?;
    let present: Vec<[f64; 7]> = hu.iter().flatten().copied().collect();
    let mut sorted = areas.clone();
    sorted.sort_unstable();
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    let thin = areas.iter().filter(|&&a| (a as f64) < config.thin_area_fraction * median).count();
    Ok(SweepShape {
        dispersion: dispersion(&present),
        thin_score: thin as f64 / n as f64,
        hu,
        areas,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JanusReport {
    pub scene: SweepShape,
    pub reference: SweepShape,
    /// Scene dispersion over the reference dispersion.
    pub ratio: f64,
    pub inconsistent: bool,
}

pub fn janus_proxy(
    scene: &(dyn Renderable + Sync),
    reference: &(dyn Renderable + Sync),
    config: &SweepConfig,
) -> Result<JanusReport> {
    let s = sweep_shape(&ViewSweep::render(scene, config)?, config)?;
    let r = sweep_shape(&ViewSweep::render(reference, config)?, config)?;
    let ratio = s.dispersion / r.dispersion.max(DISPERSION_EPS);
    Ok(JanusReport {
        inconsistent: ratio > config.ratio_threshold || s.thin_score > config.thin_threshold,
        ratio,
        scene: s,
        reference: r,
    })
}
