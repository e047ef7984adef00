//! Front-to-back splat compositing and its adjoint.
//!
//! Every visible Gaussian gets one global position in a depth order that is
//! made total by comparing parameters and then indices. Each pixel walks the
//! Gaussians whose truncated footprint covers it in that order, so the
//! per-pixel sequence is exactly the per-pixel depth sort. Tiles only narrow
//! the candidate lists; the footprint test alone decides coverage, so the
//! image does not depend on the tile size.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::image::{RenderedImage, RgbImage, BACKGROUND_DEPTH};
use super::project::{project_with, Projected, RenderSettings};
use crate::error::Result;
use crate::scene::gaussian::{quat_matrix_backward, PARAMS_PER_GAUSSIAN};
use crate::scene::{CameraPose, GaussianScene};

const TILE: usize = 8;

/// Everything the backward pass needs from a forward render.
#[derive(Debug, Clone)]
pub struct RenderTrace {
    pub camera: CameraPose,
    pub background: [f64; 3],
    pub settings: RenderSettings,
    pub projections: Vec<Option<Projected>>,
    opacities: Vec<f64>,
    /// `offsets[p]..offsets[p + 1]` indexes `contributors` for pixel `p`.
    offsets: Vec<usize>,
    contributors: Vec<u32>,
}

impl RenderTrace {
    /// Gaussians composited at pixel `(x, y)`, front to back.
    pub fn pixel_contributors(&self, x: usize, y: usize) -> &[u32] {
        let p = y * self.camera.width + x;
        &self.contributors[self.offsets[p]..self.offsets[p + 1]]
    }

    /// Whether Gaussian `i` covered at least one pixel.
    pub fn visible(&self) -> Vec<bool> {
        let mut v = vec![false; self.projections.len()];
        for &i in &self.contributors {
            v[i as usize] = true;
        }
        v
    }
}

/// Per-Gaussian partials of a scalar loss.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGradients {
    pub mean: Vec<Vector3<f64>>,
    pub log_scale: Vec<Vector3<f64>>,
    pub rotation: Vec<[f64; 4]>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<Vector3<f64>>,
    /// Norm of the loss gradient with respect to the projected mean in
    /// normalized device coordinates, for a loss averaged over pixels.
    pub view_grad: Vec<f64>,
    pub visible: Vec<bool>,
}

impl RenderGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            mean: vec![Vector3::zeros(); n],
            log_scale: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            opacity_logit: vec![0.0; n],
            color: vec![Vector3::zeros(); n],
            view_grad: vec![0.0; n],
            visible: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Flat layout matching [`GaussianScene::params`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * PARAMS_PER_GAUSSIAN);
        for i in 0..self.len() {
            out.extend_from_slice(self.mean[i].as_slice());
            out.extend_from_slice(self.log_scale[i].as_slice());
            out.extend_from_slice(&self.rotation[i]);
            out.push(self.opacity_logit[i]);
            out.extend_from_slice(self.color[i].as_slice());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite()) && self.view_grad.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.to_flat().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Adds the view-space statistics of visible Gaussians to the scene.
    pub fn accumulate_into(&self, scene: &mut GaussianScene) {
        for i in 0..self.len().min(scene.len()) {
            if self.visible[i] {
                scene.grad_accum[i] += self.view_grad[i];
                scene.grad_count[i] += 1;
            }
        }
    }
}

#[inline]
fn splat_weight(p: &Projected, px: f64, py: f64, k2: f64) -> Option<(f64, f64, f64)> {
    let dx = px - p.mean2d.x;
    let dy = py - p.mean2d.y;
    let [a, b, c] = p.conic;
    let maha = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
    if maha > k2 {
        return None;
    }
    Some(((-0.5 * maha).exp(), dx, dy))
}

fn depth_order(scene: &GaussianScene, projections: &[Option<Projected>]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..scene.len() as u32)
        .filter(|&i| projections[i as usize].is_some())
        .collect();
    order.sort_by(|&i, &j| {
        let (pi, pj) = (projections[i as usize].unwrap(), projections[j as usize].unwrap());
        pi.depth
            .total_cmp(&pj.depth)
            .then_with(|| scene.gaussians[i as usize].canonical_cmp(&scene.gaussians[j as usize]))
            .then(i.cmp(&j))
    });
    order
}

struct Bins {
    tiles_x: usize,
    lists: Vec<Vec<u32>>,
}

fn bin(order: &[u32], projections: &[Option<Projected>], width: usize, height: usize) -> Bins {
    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for &i in order {
        let p = projections[i as usize].as_ref().unwrap();
        // Slightly inflated so rounding never drops a covered pixel.
        let ex = p.extent.x * (1.0 + 1e-9) + 1e-6;
        let ey = p.extent.y * (1.0 + 1e-9) + 1e-6;
        let x0 = (p.mean2d.x - ex - 0.5).ceil();
        let x1 = (p.mean2d.x + ex - 0.5).floor();
        let y0 = (p.mean2d.y - ey - 0.5).ceil();
        let y1 = (p.mean2d.y + ey - 0.5).floor();
        if !(x1 >= 0.0 && y1 >= 0.0 && x0 <= (width - 1) as f64 && y0 <= (height - 1) as f64) {
            continue;
        }
        let x0 = x0.max(0.0) as usize / TILE;
        let x1 = (x1.min((width - 1) as f64) as usize) / TILE;
        let y0 = y0.max(0.0) as usize / TILE;
        let y1 = (y1.min((height - 1) as f64) as usize) / TILE;
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                lists[ty * tiles_x + tx].push(i);
            }
        }
    }
    Bins { tiles_x, lists }
}

/// Renders the scene.
pub fn render(
    scene: &GaussianScene,
    cam: &CameraPose,
    background: [f64; 3],
    settings: &RenderSettings,
) -> Result<RenderedImage> {
    Ok(render_with_trace(scene, cam, background, settings)?.0)
}

struct ChunkOut {
    rgb: Vec<f64>,
    depth: Vec<f64>,
    alpha: Vec<f64>,
    counts: Vec<usize>,
    contributors: Vec<u32>,
}

/// Renders and keeps the per-pixel compositing order for the backward pass.
pub fn render_with_trace(
    scene: &GaussianScene,
    cam: &CameraPose,
    background: [f64; 3],
    settings: &RenderSettings,
) -> Result<(RenderedImage, RenderTrace)> {
    cam.validate()?;
    scene.check_finite()?;
    let (width, height) = (cam.width, cam.height);
    let w = cam.rotation();
    let projections: Vec<Option<Projected>> = scene
        .gaussians
        .par_iter()
        .map(|g| project_with(g, cam, &w, settings))
        .collect();
    let opacities: Vec<f64> = scene.gaussians.iter().map(|g| g.opacity()).collect();
    let order = depth_order(scene, &projections);
    let bins = bin(&order, &projections, width, height);
    let k2 = settings.truncation_sigma * settings.truncation_sigma;
    let clamp = settings.alpha_clamp;

    let chunks: Vec<ChunkOut> = (0..height.div_ceil(TILE))
        .into_par_iter()
        .map(|ty| {
            let rows = (ty * TILE)..((ty + 1) * TILE).min(height);
            let n = rows.len() * width;
            let mut out = ChunkOut {
                rgb: Vec::with_capacity(3 * n),
                depth: Vec::with_capacity(n),
                alpha: Vec::with_capacity(n),
                counts: Vec::with_capacity(n),
                contributors: Vec::new(),
            };
            for y in rows {
                let py = y as f64 + 0.5;
                for x in 0..width {
                    let px = x as f64 + 0.5;
                    let list = &bins.lists[ty * bins.tiles_x + x / TILE];
                    let mut t = 1.0;
                    let mut c = [0.0; 3];
                    let mut acc = 0.0;
                    let mut zacc = 0.0;
                    let start = out.contributors.len();
                    for &i in list {
                        let p = projections[i as usize].as_ref().unwrap();
                        let Some((gw, _, _)) = splat_weight(p, px, py, k2) else {
                            continue;
                        };
                        let a = (opacities[i as usize] * gw).min(clamp);
                        let wgt = a * t;
                        let col = &scene.gaussians[i as usize].color;
                        c[0] += col.x * wgt;
                        c[1] += col.y * wgt;
                        c[2] += col.z * wgt;
                        acc += wgt;
                        zacc += p.depth * wgt;
                        t *= 1.0 - a;
                        out.contributors.push(i);
                    }
                    for k in 0..3 {
                        out.rgb.push(c[k] + background[k] * t);
                    }
                    out.alpha.push(acc);
                    out.depth.push(if acc > settings.depth_min_alpha {
                        zacc / acc
                    } else {
                        BACKGROUND_DEPTH
                    });
                    out.counts.push(out.contributors.len() - start);
                }
            }
            out
        })
        .collect();

    let mut rgb = Vec::with_capacity(3 * width * height);
    let mut depth = Vec::with_capacity(width * height);
    let mut alpha = Vec::with_capacity(width * height);
    let mut offsets = Vec::with_capacity(width * height + 1);
    let mut contributors = Vec::with_capacity(chunks.iter().map(|c| c.contributors.len()).sum());
    offsets.push(0);
    for ch in chunks {
        rgb.extend_from_slice(&ch.rgb);
        depth.extend_from_slice(&ch.depth);
        alpha.extend_from_slice(&ch.alpha);
        for cnt in ch.counts {
            offsets.push(offsets.last().unwrap() + cnt);
        }
        contributors.extend_from_slice(&ch.contributors);
    }
    let image = RenderedImage {
        rgb: RgbImage {
            width,
            height,
            data: rgb,
        },
        depth,
        alpha,
    };
    let trace = RenderTrace {
        camera: *cam,
        background,
        settings: *settings,
        projections,
        opacities,
        offsets,
        contributors,
    };
    Ok((image, trace))
}

/// Screen-space partials for one Gaussian.
#[derive(Clone, Copy, Default)]
struct Partial {
    mean2d: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl Partial {
    fn add(&mut self, o: &Partial) {
        self.mean2d[0] += o.mean2d[0];
        self.mean2d[1] += o.mean2d[1];
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

/// Adjoint of the forward render recorded in `trace` for a per-pixel RGB gradient.
pub fn backward_from_trace(
    scene: &GaussianScene,
    trace: &RenderTrace,
    loss_grad: &RgbImage,
) -> Result<RenderGradients> {
    let (width, height) = (trace.camera.width, trace.camera.height);
    RgbImage::new(width, height).check_shape(loss_grad, "render_backward loss gradient")?;
    if trace.projections.len() != scene.len() {
        return Err(crate::Error::contract("render trace was recorded for a different scene"));
    }
    let n = scene.len();
    let k2 = trace.settings.truncation_sigma * trace.settings.truncation_sigma;
    let clamp = trace.settings.alpha_clamp;
    let bg = trace.background;

    let partials: Vec<Vec<Partial>> = (0..height.div_ceil(TILE))
        .into_par_iter()
        .map(|ty| {
            let mut acc = vec![Partial::default(); n];
            let mut alphas: Vec<(f64, f64, f64, f64, bool)> = Vec::new();
            let mut ts: Vec<f64> = Vec::new();
            for y in (ty * TILE)..((ty + 1) * TILE).min(height) {
                let py = y as f64 + 0.5;
                for x in 0..width {
                    let pix = y * width + x;
                    let g = &loss_grad.data[3 * pix..3 * pix + 3];
                    if g[0] == 0.0 && g[1] == 0.0 && g[2] == 0.0 {
                        continue;
                    }
                    let px = x as f64 + 0.5;
                    let ids = &trace.contributors[trace.offsets[pix]..trace.offsets[pix + 1]];
                    alphas.clear();
                    for &i in ids {
                        let p = trace.projections[i as usize].as_ref().unwrap();
                        let (gw, dx, dy) = splat_weight(p, px, py, k2).unwrap();
                        let raw = trace.opacities[i as usize] * gw;
                        alphas.push((raw.min(clamp), gw, dx, dy, raw > clamp));
                    }
                    let mut behind = [bg[0], bg[1], bg[2]];
                    // Transmittance in front of each splat, then a back-to-front
                    // sweep carrying the colour composited behind it.
                    ts.clear();
                    let mut tt = 1.0;
                    for a in &alphas {
                        ts.push(tt);
                        tt *= 1.0 - a.0;
                    }
                    for (k, &i) in ids.iter().enumerate().rev() {
                        let (a, gw, dx, dy, clamped) = alphas[k];
                        let tk = ts[k];
                        let col = &scene.gaussians[i as usize].color;
                        let c = [col.x, col.y, col.z];
                        let slot = &mut acc[i as usize];
                        let mut d_alpha = 0.0;
                        for ch in 0..3 {
                            slot.color[ch] += g[ch] * a * tk;
                            d_alpha += g[ch] * (c[ch] - behind[ch]);
                        }
                        d_alpha *= tk;
                        for ch in 0..3 {
                            behind[ch] = c[ch] * a + (1.0 - a) * behind[ch];
                        }
                        if clamped {
                            continue;
                        }
                        slot.opacity += d_alpha * gw;
                        let d_power = d_alpha * a;
                        let p = trace.projections[i as usize].as_ref().unwrap();
                        let [ca, cb, cc] = p.conic;
                        slot.conic[0] += d_power * (-0.5 * dx * dx);
                        slot.conic[1] += d_power * (-dx * dy);
                        slot.conic[2] += d_power * (-0.5 * dy * dy);
                        slot.mean2d[0] += d_power * (ca * dx + cb * dy);
                        slot.mean2d[1] += d_power * (cb * dx + cc * dy);
                    }
                }
            }
            acc
        })
        .collect();

    let mut total = vec![Partial::default(); n];
    for chunk in &partials {
        for (t, p) in total.iter_mut().zip(chunk) {
            t.add(p);
        }
    }
    let visible = trace.visible();
    let cam = &trace.camera;
    let w = cam.rotation();
    let f = cam.focal();
    let mut out = RenderGradients::zeros(n);
    out.visible = visible;
    for i in 0..n {
        let Some(p) = trace.projections[i].as_ref() else {
            continue;
        };
        let g = &scene.gaussians[i];
        let part = &total[i];
        out.color[i] = Vector3::from(part.color);
        let op = trace.opacities[i];
        out.opacity_logit[i] = part.opacity * op * (1.0 - op);

        // conic -> 2D covariance
        let m = Matrix2::new(p.conic[0], p.conic[1], p.conic[1], p.conic[2]);
        let gm = Matrix2::new(
            part.conic[0],
            0.5 * part.conic[1],
            0.5 * part.conic[1],
            part.conic[2],
        );
        let g_cov2d = -(m * gm * m);
        // 2D covariance -> camera covariance and Jacobian
        let jac = &p.jacobian;
        let g_cov_cam = jac.transpose() * g_cov2d * jac;
        let g_jac = 2.0 * g_cov2d * jac * p.cov_cam;
        let (tx, ty, tz) = (p.t.x, p.t.y, p.t.z);
        let iz = 1.0 / tz;
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        let gm2 = Vector2::new(part.mean2d[0], part.mean2d[1]);
        let mut g_t = jac.transpose() * gm2;
        g_t.x += g_jac[(0, 2)] * (-f * iz2);
        g_t.y += g_jac[(1, 2)] * (-f * iz2);
        g_t.z += (g_jac[(0, 0)] + g_jac[(1, 1)]) * (-f * iz2)
            + g_jac[(0, 2)] * (2.0 * f * tx * iz3)
            + g_jac[(1, 2)] * (2.0 * f * ty * iz3);
        out.mean[i] = w.transpose() * g_t;

        // camera covariance -> world covariance -> rotation and scale
        let g_sigma = w.transpose() * g_cov_cam * w;
        let g_sigma = 0.5 * (g_sigma + g_sigma.transpose());
        let r = g.rotation_matrix();
        let s = g.scale();
        let s2 = Matrix3::from_diagonal(&s.map(|v| v * v));
        let g_r = 2.0 * g_sigma * r * s2;
        let rgr = r.transpose() * g_sigma * r;
        out.log_scale[i] = Vector3::new(
            2.0 * s.x * s.x * rgr[(0, 0)],
            2.0 * s.y * s.y * rgr[(1, 1)],
            2.0 * s.z * s.z * rgr[(2, 2)],
        );
        out.rotation[i] = quat_matrix_backward(g.rotation, &g_r);

        let ndc = Vector2::new(
            part.mean2d[0] * 0.5 * cam.width as f64,
            part.mean2d[1] * 0.5 * cam.height as f64,
        );
        out.view_grad[i] = ndc.norm() / cam.pixel_count() as f64;
    }
    Ok(out)
}

/// Renders, differentiates against `loss_grad` and accumulates the
/// view-space statistics into `scene`.
pub fn render_backward(
    scene: &mut GaussianScene,
    cam: &CameraPose,
    background: [f64; 3],
    loss_grad: &RgbImage,
    settings: &RenderSettings,
) -> Result<RenderGradients> {
    let (_, trace) = render_with_trace(scene, cam, background, settings)?;
    let grads = backward_from_trace(scene, &trace, loss_grad)?;
    grads.accumulate_into(scene);
    Ok(grads)
}
