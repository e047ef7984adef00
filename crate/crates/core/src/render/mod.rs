//! Differentiable Gaussian splatting.

pub mod image;
pub mod project;
pub mod raster;
pub mod reference;

pub use image::{RenderedImage, RgbImage, BACKGROUND_DEPTH, LUMA};
pub use project::{project, Projected, RenderSettings};
pub use raster::{backward_from_trace, render, render_backward, render_with_trace, RenderGradients, RenderTrace};
pub use reference::{rasterize_mesh, render_reference, render_reference_with, ReferenceRenderer, Renderable};
