//! `geomoment` command-line front end.
//!
//! Exit codes: 0 on success, 2 for configuration or input errors, 3 when an
//! optimization step produced a non-finite value.

mod config;
mod optimize;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geomoment::eval::{metrics_report, write_report, SweepConfig};
use geomoment::io::ply::{pointcloud_from_ply, scene_from_ply, Ply};
use geomoment::io::png;
use geomoment::optim::StepRecord;
use geomoment::render::{render, RenderSettings, RenderedImage, Renderable};
use geomoment::retrieval::{retrieve, Catalog};
use geomoment::{CameraPose, GaussianScene, Intrinsics, ReferenceAsset};
use serde::Serialize;

pub use config::RunConfig;

pub const CATALOG_ENV: &str = "GEOMOMENT_CATALOG";

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<geomoment::Error> for CliError {
    fn from(e: geomoment::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}

pub(crate) fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "geomoment", version, about = "Retrieval-guided Gaussian splat optimization")]
struct Cli {
    /// Worker threads for rendering and optimization (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rank catalog entries against a prompt.
    Retrieve(RetrieveArgs),
    /// Run both optimization stages and write a run directory.
    Optimize(OptimizeArgs),
    /// Render a scene from one camera or a turntable.
    Render(RenderArgs),
    /// Compare a scene against a reference over a view sweep.
    Eval(EvalArgs),
    /// Print the default run configuration as TOML.
    Defaults,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    prompt: String,
    #[arg(long, env = CATALOG_ENV)]
    catalog: PathBuf,
    /// Print only the best `top` matches.
    #[arg(long)]
    top: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the output directory in the config.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Used when the config names neither an asset nor a catalog.
    #[arg(long, env = CATALOG_ENV)]
    pub catalog: Option<PathBuf>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this step, leaving a checkpoint to resume from.
    #[arg(long)]
    pub until: Option<u64>,
    /// Validate, render the initial frame and stop.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
struct RenderArgs {
    /// Gaussian scene PLY.
    #[arg(long)]
    scene: PathBuf,
    /// Output PNG, or a directory with `--turntable`.
    #[arg(long)]
    out: PathBuf,
    /// Degrees.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    azimuth: f64,
    /// Degrees.
    #[arg(long, default_value_t = 15.0, allow_negative_numbers = true)]
    elevation: f64,
    #[arg(long, default_value_t = 4.0)]
    radius: f64,
    /// Vertical field of view in degrees.
    #[arg(long, default_value_t = 40.0)]
    fov: f64,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Render this many evenly spaced azimuths starting at `--azimuth`.
    #[arg(long)]
    turntable: Option<usize>,
    /// Also write a 16-bit depth PNG next to each color image.
    #[arg(long)]
    depth: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Reference: a point cloud or scene PLY, or `toy:<name>`.
    #[arg(long)]
    asset: String,
    /// Sweep settings as TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Metrics log of the run, for loss curves.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Optimize(a) => optimize::cmd_optimize(a),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Defaults => {
            print!("{}", RunConfig::default().to_toml());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[derive(Serialize)]
pub(crate) struct Match {
    rank: usize,
    index: usize,
    similarity: f64,
    path: String,
    caption: String,
}

pub(crate) fn ranked(catalog: &Catalog, ranking: &[(usize, f64)]) -> Vec<Match> {
    ranking
        .iter()
        .enumerate()
        .map(|(rank, &(index, similarity))| Match {
            rank: rank + 1,
            index,
            similarity,
            path: catalog.entries[index].asset_path.display().to_string(),
            caption: catalog.entries[index].caption.clone(),
        })
        .collect()
}

fn cmd_retrieve(a: RetrieveArgs) -> Result<(), CliError> {
    let catalog = Catalog::load(&a.catalog)?;
    let r = retrieve(&a.prompt, &catalog)?;
    let mut matches = ranked(&catalog, &r.ranking);
    matches.truncate(a.top.unwrap_or(usize::MAX));
    if a.json {
        println!("{}", serde_json::to_string_pretty(&matches).expect("serializes"));
    } else {
        for m in &matches {
            println!("{}\t{:.6}\t{}\t{}", m.rank, m.similarity, m.path, m.caption);
        }
    }
    Ok(())
}

fn turntable_name(k: usize, azimuth_deg: f64) -> String {
    format!("view_{k:02}_az{:07.3}.png", azimuth_deg.rem_euclid(360.0))
}

fn write_view(img: &RenderedImage, path: &Path, depth: bool, intr: &Intrinsics) -> Result<(), CliError> {
    png::write_rgb(&img.rgb, path)?;
    if depth {
        let dpath = path.with_extension("depth.png");
        png::write_depth(&img.depth, img.width(), img.height(), intr.near, intr.far, &dpath)?;
    }
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<(), CliError> {
    let scene = geomoment::io::read_scene(&a.scene)?;
    let intr = Intrinsics {
        fov_y: a.fov.to_radians(),
        width: a.width,
        height: a.height,
        ..Intrinsics::default()
    };
    let settings = RenderSettings::default();
    match a.turntable {
        None => {
            let cam = CameraPose::orbit(a.azimuth.to_radians(), a.elevation.to_radians(), a.radius, intr)?;
            if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
            let img = render(&scene, &cam, [0.0; 3], &settings)?;
            write_view(&img, &a.out, a.depth, &intr)?;
            println!("{}", a.out.display());
        }
        Some(n) => {
            let sweep = SweepConfig {
                views: n,
                elevation_deg: a.elevation,
                radius: a.radius,
                start_azimuth_deg: a.azimuth,
                intrinsics: intr,
                ..SweepConfig::default()
            };
            let views = geomoment::eval::ViewSweep::render(&scene, &sweep)?;
            std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
            for (k, img) in views.renders.iter().enumerate() {
                let az = a.azimuth + 360.0 * k as f64 / n as f64;
                let path = a.out.join(turntable_name(k, az));
                write_view(img, &path, a.depth, &intr)?;
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

/// Reference side of an evaluation.
enum Reference {
    Asset(ReferenceAsset),
    Scene(GaussianScene),
}

impl Renderable for Reference {
    fn render_view(
        &self,
        cam: &CameraPose,
        background: [f64; 3],
        settings: &RenderSettings,
    ) -> geomoment::Result<RenderedImage> {
        match self {
            Reference::Asset(a) => a.render_view(cam, background, settings),
            Reference::Scene(s) => s.render_view(cam, background, settings),
        }
    }
}

/// Scene PLYs carry per-Gaussian scales; anything else is a point cloud.
fn load_reference(spec: &str) -> Result<Reference, CliError> {
    if spec.starts_with(geomoment::io::TOY_PREFIX) {
        return Ok(Reference::Asset(geomoment::io::load_asset(Path::new(spec), "")?));
    }
    let path = Path::new(spec);
    let ply = Ply::read(path)?;
    let is_scene = ply.element("vertex").is_some_and(|v| v.index_of("scale_0").is_some());
    if is_scene {
        Ok(Reference::Scene(scene_from_ply(&ply)?))
    } else {
        let caption = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Reference::Asset(pointcloud_from_ply(&ply)?.into_asset(&caption)?))
    }
}

pub(crate) fn read_log(path: &Path) -> Result<Vec<StepRecord>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Input(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let scene = geomoment::io::read_scene(&a.scene)?;
    let reference = load_reference(&a.asset)?;
    let sweep: SweepConfig = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            toml::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?
        }
        None => SweepConfig::default(),
    };
    sweep.validate()?;
    let log = match &a.log {
        Some(p) => read_log(p)?,
        None => Vec::new(),
    };
    let report = metrics_report(&log, &scene, &reference, &sweep)?;
    write_report(&report, &a.out)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("serializes"));
    } else {
        match report.iou.as_ref().and_then(|r| r.mean) {
            Some(iou) => println!("iou\t{iou:.6}"),
            None => println!("iou\tn/a"),
        }
        match &report.janus {
            Some(j) => println!("janus_ratio\t{:.6}\ninconsistent\t{}", j.ratio, j.inconsistent),
            None => println!("janus_ratio\tn/a"),
        }
    }
    Ok(())
}
