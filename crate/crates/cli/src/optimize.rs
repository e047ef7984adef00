//! The `optimize` command and its run directory:
//!
//! ```text
//! config.toml      resolved configuration
//! run.json         prompt, chosen asset and retrieval ranking
//! metrics.jsonl    one StepRecord per line
//! frames/          turntable strips every `frame_interval` steps
//! checkpoint/      latest resumable state
//! abort/           state before a numerical abort, if any
//! scene.ply        final scene
//! report/          metrics report of the final scene
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use geomoment::eval::{metrics_report, write_report, ViewSweep};
use geomoment::io::{load_asset, png, write_scene, PlyFormat};
use geomoment::optim::{StepRecord, Trainer};
use geomoment::retrieval::{retrieve, Catalog};
use geomoment::Error;
use serde::Serialize;

use crate::{io_err, ranked, read_log, CliError, Match, OptimizeArgs, RunConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SCENE_FILE: &str = "scene.ply";

#[derive(Serialize)]
struct RunInfo<'a> {
    prompt: &'a str,
    asset: String,
    caption: String,
    seed: u64,
    total_steps: u64,
    ranking: Option<Vec<Match>>,
}

fn frame(trainer: &Trainer, cfg: &RunConfig, step: u64) -> geomoment::Result<()> {
    let sweep = ViewSweep::render(&trainer.state.scene, &cfg.sweep)?;
    let strip = png::hstack(&sweep.renders.iter().map(|r| r.rgb.clone()).collect::<Vec<_>>())?;
    png::write_rgb(&strip, &cfg.output.join("frames").join(format!("step_{step:06}.png")))
}

fn write_line(out: &mut BufWriter<File>, rec: &StepRecord, path: &Path) -> geomoment::Result<()> {
    let line = serde_json::to_string(rec).expect("record serializes");
    writeln!(out, "{line}")
        .and_then(|_| out.flush())
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
}

fn choose_asset(cfg: &RunConfig) -> Result<(String, String, Option<Vec<Match>>), CliError> {
    if let Some(a) = &cfg.asset {
        return Ok((a.clone(), cfg.prompt.clone(), None));
    }
    let path = cfg.catalog.as_ref().ok_or_else(|| {
        CliError::Input(format!("no asset or catalog given (set one in the config or {})", crate::CATALOG_ENV))
    })?;
    let catalog = Catalog::load(path)?;
    let r = retrieve(&cfg.prompt, &catalog)?;
    let entry = &catalog.entries[r.best];
    Ok((
        entry.asset_path.display().to_string(),
        entry.caption.clone(),
        Some(ranked(&catalog, &r.ranking)),
    ))
}

pub fn cmd_optimize(a: OptimizeArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(out) = a.output {
        cfg.output = out;
    }
    if cfg.catalog.is_none() {
        cfg.catalog = a.catalog;
    }
    cfg.validate()?;
    let (asset_ref, caption, ranking) = choose_asset(&cfg)?;
    let asset = Arc::new(load_asset(Path::new(&asset_ref), &caption)?);

    let out = cfg.output.clone();
    let frames = out.join("frames");
    std::fs::create_dir_all(&frames).map_err(|e| io_err(&frames, e))?;
    let ckpt = out.join("checkpoint");
    let mut trainer = if a.resume {
        Trainer::resume(cfg.train_config(), asset.clone(), &cfg.prompt, &ckpt)?
    } else {
        Trainer::new(cfg.train_config(), asset.clone(), &cfg.prompt)?
    };

    let write = |name: &str, text: String| -> Result<(), CliError> {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| io_err(&p, e))
    };
    write(CONFIG_FILE, cfg.to_toml())?;
    let info = RunInfo {
        prompt: &cfg.prompt,
        asset: asset_ref,
        caption,
        seed: cfg.seed,
        total_steps: trainer.total_steps(),
        ranking,
    };
    write(RUN_FILE, serde_json::to_string_pretty(&info).expect("serializes") + "\n")?;

    if a.dry_run {
        frame(&trainer, &cfg, trainer.state.step)?;
        println!("dry run ok: {} steps, {} gaussians", trainer.total_steps(), trainer.state.scene.len());
        return Ok(());
    }

    // Records past the checkpoint belong to the interrupted tail and are replayed.
    let metrics_path = out.join(METRICS_FILE);
    let mut log: Vec<StepRecord> = if a.resume && metrics_path.exists() {
        read_log(&metrics_path)?
            .into_iter()
            .filter(|r| r.step <= trainer.state.step)
            .collect()
    } else {
        Vec::new()
    };
    let mut writer = BufWriter::new(File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?);
    for r in &log {
        write_line(&mut writer, r, &metrics_path)?;
    }
    if trainer.state.step == 0 {
        frame(&trainer, &cfg, 0)?;
    }

    let until = a.until.unwrap_or(u64::MAX);
    let result = trainer.run_until(until, &mut |rec, tr| {
        write_line(&mut writer, rec, &metrics_path)?;
        log.push(rec.clone());
        if rec.step % cfg.frame_interval == 0 {
            frame(tr, &cfg, rec.step)?;
        }
        if rec.step % cfg.checkpoint_interval == 0 {
            tr.state.save(&ckpt)?;
        }
        if a.json {
            println!("{}", serde_json::to_string(rec).expect("record serializes"));
        }
        Ok(())
    });
    if let Err(e) = result {
        if e.is_numerical() {
            let abort = out.join("abort");
            trainer.state.save(&abort)?;
            return Err(CliError::Numerical(format!("{e} (state saved to {})", abort.display())));
        }
        return Err(e.into());
    }

    trainer.state.save(&ckpt)?;
    if !trainer.is_done() {
        println!("stopped at step {}; resume with --resume", trainer.state.step);
        return Ok(());
    }
    let scene_path: PathBuf = out.join(SCENE_FILE);
    write_scene(&trainer.state.scene, &scene_path, PlyFormat::BinaryLittleEndian)?;
    let report = metrics_report(&log, &trainer.state.scene, asset.as_ref(), &cfg.sweep)?;
    write_report(&report, &out.join("report"))?;
    if !a.json {
        let iou = report.iou.as_ref().and_then(|r| r.mean);
        println!(
            "done: {} steps, {} gaussians, iou {}",
            trainer.state.step,
            trainer.state.scene.len(),
            iou.map_or("n/a".into(), |v| format!("{v:.4}"))
        );
        println!("{}", scene_path.display());
    }
    Ok(())
}
