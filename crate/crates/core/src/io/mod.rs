//! File formats: PLY scenes and point clouds, PNG images.

pub mod ply;
pub mod png;

use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::ReferenceAsset;

pub use ply::{read_pointcloud, read_scene, write_pointcloud, write_scene, Ply, PlyFormat, PointCloud};

/// Prefix naming a built-in toy asset instead of a file.
pub const TOY_PREFIX: &str = "toy:";

/// Loads a reference asset from a PLY file or a `toy:<name>` reference.
pub fn load_asset(path: &Path, caption: &str) -> Result<ReferenceAsset> {
    if let Some(name) = path.to_str().and_then(|s| s.strip_prefix(TOY_PREFIX)) {
        let mut asset = crate::toy::by_name(name).ok_or_else(|| {
            Error::config(format!("unknown toy asset {name:?}; known: {}", crate::toy::NAMES.join(", ")))
        })?;
        if !caption.is_empty() {
            asset.caption = caption.to_string();
        }
        return Ok(asset);
    }
    read_pointcloud(path)?.into_asset(caption)
}
