//! Text-to-3D optimization of Gaussian splats guided by score distillation
//! against a retrieved reference asset, with a moment-feature shape loss.
//!
//! The crate is organised bottom-up: [`scene`] holds the data model,
//! [`render`] the differentiable splatting renderer, [`moments`] the image
//! moment features, [`guidance`] the noise schedule and score oracles,
//! [`optim`] the two-stage training loop and [`eval`] the consistency metrics.

pub mod error;
pub mod eval;
pub mod guidance;
pub mod io;
pub mod moments;
pub mod optim;
pub mod render;
pub mod retrieval;
pub mod scene;
pub mod spatial;
pub mod toy;

pub use error::{Error, Result};
pub use scene::{
    CameraPose, CameraSampler, Gaussian3D, GaussianScene, Intrinsics, PromptEmbedding, Range,
    ReferenceAsset,
};
