use std::path::{Path, PathBuf};

use geomoment::eval::SweepConfig;
use geomoment::guidance::GuidanceConfig;
use geomoment::optim::{StageConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything an `optimize` run needs. Relative paths resolve against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub prompt: String,
    /// Catalog used for retrieval. Falls back to `GEOMOMENT_CATALOG`.
    pub catalog: Option<PathBuf>,
    /// Skips retrieval and uses this asset (a PLY path or `toy:<name>`).
    pub asset: Option<String>,
    pub output: PathBuf,
    pub seed: u64,
    /// Turntable frames are written every this many steps.
    pub frame_interval: u64,
    pub checkpoint_interval: u64,
    pub stage: StageConfig,
    pub guidance: GuidanceConfig,
    /// Camera sweep used for frames and the final report.
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            prompt: "a smooth sphere".into(),
            catalog: None,
            asset: None,
            output: PathBuf::from("run"),
            seed: 0,
            frame_interval: 500,
            checkpoint_interval: 1000,
            stage: StageConfig::default(),
            guidance: GuidanceConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Input(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        self.output = join(&self.output);
        self.catalog = self.catalog.as_deref().map(join);
        if let Some(a) = &self.asset {
            if !a.starts_with(geomoment::io::TOY_PREFIX) {
                self.asset = Some(join(Path::new(a)).display().to_string());
            }
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            stage: self.stage.clone(),
            guidance: self.guidance.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.prompt.trim().is_empty() {
            return Err(CliError::Input("prompt is empty".into()));
        }
        if self.frame_interval == 0 || self.checkpoint_interval == 0 {
            return Err(CliError::Input("frame and checkpoint intervals must be positive".into()));
        }
        self.train_config().validate()?;
        self.sweep.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
