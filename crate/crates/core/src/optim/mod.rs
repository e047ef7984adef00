//! Two-stage optimization: geometry refinement, then texture refinement with
//! densification and pruning.

pub mod adam;
pub mod config;
pub mod densify;
pub mod trainer;

pub use adam::Adam;
pub use config::{LearningRates, Stage, StageConfig, TrainConfig};
pub use densify::{densify_compact, densify_split, gap_filler, prune, Edit};
pub use trainer::{
    moving_average, run_pipeline, PipelineOutput, RunningMean, StepForward, StepRecord, TrainState, Trainer,
    OPTIMIZER_FILE, SCENE_FILE, SURROGATE_FILE,
};
