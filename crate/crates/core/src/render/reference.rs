//! Rendering of reference assets, which are never differentiated.

use std::sync::{Arc, Mutex};

use nalgebra::Vector3;

use super::image::{RenderedImage, BACKGROUND_DEPTH};
use super::project::RenderSettings;
use super::raster::render;
use crate::error::Result;
use crate::scene::{CameraPose, GaussianScene, ReferenceAsset, TriangleMesh};

/// Anything that can be drawn from a camera.
pub trait Renderable {
    fn render_view(&self, cam: &CameraPose, background: [f64; 3], settings: &RenderSettings) -> Result<RenderedImage>;
}

impl Renderable for GaussianScene {
    fn render_view(&self, cam: &CameraPose, background: [f64; 3], settings: &RenderSettings) -> Result<RenderedImage> {
        render(self, cam, background, settings)
    }
}

impl Renderable for ReferenceAsset {
    fn render_view(&self, cam: &CameraPose, background: [f64; 3], settings: &RenderSettings) -> Result<RenderedImage> {
        render_reference_with(self, cam, background, settings)
    }
}

/// Reference render on a black background with default settings.
pub fn render_reference(asset: &ReferenceAsset, cam: &CameraPose) -> Result<RenderedImage> {
    render_reference_with(asset, cam, [0.0; 3], &RenderSettings::default())
}

/// Meshes are rasterized; point clouds are drawn as small opaque splats.
pub fn render_reference_with(
    asset: &ReferenceAsset,
    cam: &CameraPose,
    background: [f64; 3],
    settings: &RenderSettings,
) -> Result<RenderedImage> {
    match &asset.mesh {
        Some(mesh) if !mesh.faces.is_empty() => rasterize_mesh(mesh, cam, background),
        _ => render(asset.splat_scene(), cam, background, settings),
    }
}

/// Z-buffered triangle rasterization with perspective-correct vertex colours.
/// Pixel centers on a shared edge go to the first face that passes the depth test.
pub fn rasterize_mesh(mesh: &TriangleMesh, cam: &CameraPose, background: [f64; 3]) -> Result<RenderedImage> {
    cam.validate()?;
    let (w, h) = (cam.width, cam.height);
    let mut img = RenderedImage::background(w, h, background);
    let rot = cam.rotation();
    let f = cam.focal();
    let (cx, cy) = cam.principal_point();
    let cam_pts: Vec<Vector3<f64>> = mesh.vertices.iter().map(|v| rot * (v - cam.position)).collect();
    for face in &mesh.faces {
        let [ia, ib, ic] = face.map(|i| i as usize);
        let t = [cam_pts[ia], cam_pts[ib], cam_pts[ic]];
        if t.iter().any(|p| p.z < cam.near || p.z > cam.far) {
            continue;
        }
        let s: Vec<(f64, f64)> = t.iter().map(|p| (f * p.x / p.z + cx, f * p.y / p.z + cy)).collect();
        let area = edge(s[0], s[1], s[2]);
        if area == 0.0 {
            continue;
        }
        let xmin = s.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let xmax = s.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let ymin = s.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let ymax = s.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let x0 = (xmin - 0.5).ceil().max(0.0) as usize;
        let y0 = (ymin - 0.5).ceil().max(0.0) as usize;
        let x1 = (xmax - 0.5).floor().min(w as f64 - 1.0);
        let y1 = (ymax - 0.5).floor().min(h as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let colors = [mesh.colors[ia], mesh.colors[ib], mesh.colors[ic]];
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let p = (x as f64 + 0.5, y as f64 + 0.5);
                let b0 = edge(s[1], s[2], p) / area;
                let b1 = edge(s[2], s[0], p) / area;
                let b2 = edge(s[0], s[1], p) / area;
                if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                    continue;
                }
                // Perspective-correct weights.
                let (w0, w1, w2) = (b0 / t[0].z, b1 / t[1].z, b2 / t[2].z);
                let sum = w0 + w1 + w2;
                let z = 1.0 / sum;
                let k = y * w + x;
                if z >= img.depth[k] {
                    continue;
                }
                img.depth[k] = z;
                img.alpha[k] = 1.0;
                let c = (colors[0] * w0 + colors[1] * w1 + colors[2] * w2) / sum;
                img.rgb.data[3 * k..3 * k + 3].copy_from_slice(c.as_slice());
            }
        }
    }
    debug_assert!(img.depth.iter().all(|d| *d == BACKGROUND_DEPTH || d.is_finite()));
    Ok(img)
}

fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Reference renderer that remembers its most recent view, so the guidance
/// oracle and the training step share one render per camera.
pub struct ReferenceRenderer {
    asset: Arc<ReferenceAsset>,
    background: [f64; 3],
    settings: RenderSettings,
    last: Mutex<Option<(CameraPose, Arc<RenderedImage>)>>,
}

impl ReferenceRenderer {
    pub fn new(asset: Arc<ReferenceAsset>, background: [f64; 3], settings: RenderSettings) -> Self {
        Self {
            asset,
            background,
            settings,
            last: Mutex::new(None),
        }
    }

    pub fn asset(&self) -> &Arc<ReferenceAsset> {
        &self.asset
    }

    pub fn background(&self) -> [f64; 3] {
        self.background
    }

    pub fn render(&self, cam: &CameraPose) -> Result<Arc<RenderedImage>> {
        let mut last = self.last.lock().unwrap();
        if let Some((c, img)) = last.as_ref() {
            if c == cam {
                return Ok(img.clone());
            }
        }
        let img = Arc::new(render_reference_with(&self.asset, cam, self.background, &self.settings)?);
        *last = Some((*cam, img.clone()));
        Ok(img)
    }
}

impl std::fmt::Debug for ReferenceRenderer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReferenceRenderer")
            .field("caption", &self.asset.caption)
            .field("background", &self.background)
            .finish()
    }
}
