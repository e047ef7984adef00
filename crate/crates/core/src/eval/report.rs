use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{janus_proxy, sweep_iou, IouReport, JanusReport, SweepConfig, ViewSweep};
use crate::error::{Error, Result};
use crate::io::png;
use crate::optim::StepRecord;
use crate::render::{Renderable, RgbImage};
use crate::scene::GaussianScene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub control_loss: f64,
    pub moment_loss: f64,
    pub total_loss: f64,
    pub lambda_lora: f64,
    pub gaussians: usize,
}

/// Run summary. Metrics that could not be computed are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub steps: usize,
    pub final_control_avg: Option<f64>,
    pub final_moment_avg: Option<f64>,
    pub final_total_avg: Option<f64>,
    pub lambda_lora_first: Option<f64>,
    pub lambda_lora_last: Option<f64>,
    pub gaussians_final: usize,
    pub iou: Option<IouReport>,
    pub janus: Option<JanusReport>,
    #[serde(skip)]
    pub curves: Vec<CurvePoint>,
    #[serde(skip)]
    pub turntable: Option<RgbImage>,
}

pub fn metrics_report(
    log: &[StepRecord],
    scene: &GaussianScene,
    reference: &(dyn Renderable + Sync),
    sweep: &SweepConfig,
) -> Result<MetricsReport> {
    let curves = log
        .iter()
        .map(|r| CurvePoint {
            step: r.step,
            control_loss: r.control_loss,
            moment_loss: r.moment_loss,
            total_loss: r.total_loss,
            lambda_lora: r.lambda_lora,
            gaussians: r.gaussians,
        })
        .collect();
    let last = log.last();
    let scene_sweep = ViewSweep::render(scene, sweep)?;
    let asset_sweep = ViewSweep::render(reference, sweep)?;
    let iou = sweep_iou(&scene_sweep, &asset_sweep)?;
    let janus = match janus_proxy(scene, reference, sweep) {
        Ok(j) => Some(j),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    let strip = png::hstack(&scene_sweep.renders.iter().map(|r| r.rgb.clone()).collect::<Vec<_>>())?;
    Ok(MetricsReport {
        steps: log.len(),
        final_control_avg: last.map(|r| r.control_avg),
        final_moment_avg: last.map(|r| r.moment_avg),
        final_total_avg: last.map(|r| r.total_avg),
        lambda_lora_first: log.first().map(|r| r.lambda_lora),
        lambda_lora_last: last.map(|r| r.lambda_lora),
        gaussians_final: scene.len(),
        iou: iou.mean.is_some().then_some(iou),
        janus,
        curves,
        turntable: Some(strip),
    })
}

/// Writes `report.json`, `curves.csv` and `turntable.png` into `dir`.
pub fn write_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    let path = dir.join("report.json");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    let mut csv = String::from("step,control_loss,moment_loss,total_loss,lambda_lora,gaussians\n");
    for c in &report.curves {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            c.step, c.control_loss, c.moment_loss, c.total_loss, c.lambda_lora, c.gaussians
        );
    }
    let path = dir.join("curves.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    if let Some(strip) = &report.turntable {
        png::write_rgb(strip, &dir.join("turntable.png"))?;
    }
    Ok(())
}
