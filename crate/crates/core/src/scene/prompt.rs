//! Prompt embeddings and view-dependent prompt tags.

use std::collections::BTreeMap;

use super::camera::CameraPose;
use crate::retrieval::{tokenize, EmbeddingBackend, HashedBagOfWords};

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub text: String,
    /// Token multiset of `text`.
    pub tokens: BTreeMap<String, u32>,
    /// L2-normalized unless every entry is zero.
    pub vector: Vec<f64>,
}

impl PromptEmbedding {
    pub fn new(text: &str, backend: &dyn EmbeddingBackend) -> crate::Result<Self> {
        let mut tokens = BTreeMap::new();
        for t in tokenize(text) {
            *tokens.entry(t).or_insert(0) += 1;
        }
        Ok(Self {
            text: text.to_string(),
            tokens,
            vector: backend.embed(text)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViewTag {
    Front,
    Side,
    Back,
    Overhead,
}

impl ViewTag {
    pub fn suffix(self) -> &'static str {
        match self {
            ViewTag::Front => "front view",
            ViewTag::Side => "side view",
            ViewTag::Back => "back view",
            ViewTag::Overhead => "overhead view",
        }
    }

    /// Front covers azimuth (-45, 45] degrees, back (135, 180] and (-180, -135],
    /// side the rest; anything above 60 degrees elevation is overhead.
    pub fn from_angles(azimuth: f64, elevation: f64) -> Self {
        // Classified in degrees snapped to 1e-9 so boundary poses built from
        // whole-degree angles land on the intended side.
        let snap = |deg: f64| (deg * 1e9).round() / 1e9;
        if snap(elevation.to_degrees()) > 60.0 {
            return ViewTag::Overhead;
        }
        let az = snap(wrap_angle(azimuth).to_degrees());
        let az = if az <= -180.0 { az + 360.0 } else { az };
        if az > -45.0 && az <= 45.0 {
            ViewTag::Front
        } else if (az > 45.0 && az <= 135.0) || (az > -135.0 && az <= -45.0) {
            ViewTag::Side
        } else {
            ViewTag::Back
        }
    }
}

/// Wraps to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Appends the view tag for `camera` to the prompt and embeds the result
/// with the built-in hashed backend.
pub fn view_prompt(prompt: &str, camera: &CameraPose) -> crate::Result<PromptEmbedding> {
    view_prompt_with(prompt, camera, &HashedBagOfWords::default())
}

pub fn view_prompt_with(
    prompt: &str,
    camera: &CameraPose,
    backend: &dyn EmbeddingBackend,
) -> crate::Result<PromptEmbedding> {
    if prompt.trim().is_empty() {
        return Err(crate::Error::invalid("prompt is empty"));
    }
    let (az, el) = camera.azimuth_elevation();
    let tag = ViewTag::from_angles(az, el);
    PromptEmbedding::new(&format!("{prompt}, {}", tag.suffix()), backend)
}
