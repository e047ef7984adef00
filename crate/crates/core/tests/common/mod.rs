#![allow(dead_code)]

use geomoment::moments::GrayImage;
use geomoment::render::{backward_from_trace, render, render_with_trace, RenderSettings, RgbImage};
use geomoment::scene::{CameraPose, Gaussian3D, GaussianScene, Intrinsics};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn intrinsics(size: usize) -> Intrinsics {
    Intrinsics {
        width: size,
        height: size,
        ..Intrinsics::default()
    }
}

pub fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> GaussianScene {
    let gaussians = (0..n)
        .map(|_| {
            let mean = Vector3::new(
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
            );
            let scale = Vector3::new(
                rng.random_range(0.08..0.3),
                rng.random_range(0.08..0.3),
                rng.random_range(0.08..0.3),
            );
            let q = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let color = Vector3::new(rng.random(), rng.random(), rng.random());
            Gaussian3D::new(mean, scale, q, rng.random_range(0.15..0.85), color)
        })
        .collect();
    GaussianScene::new(gaussians)
}

/// Pixels where some Gaussian's footprint edge passes within `band` of the
/// pixel center, measured in squared Mahalanobis distance.
pub fn truncation_band_mask(scene: &GaussianScene, cam: &CameraPose, band: f64) -> Vec<bool> {
    let s = RenderSettings::default();
    let k2 = s.truncation_sigma * s.truncation_sigma;
    let mut mask = vec![false; cam.pixel_count()];
    for g in &scene.gaussians {
        let Some(p) = geomoment::render::project(g, cam, &s) else { continue };
        for y in 0..cam.height {
            for x in 0..cam.width {
                let dx = x as f64 + 0.5 - p.mean2d.x;
                let dy = y as f64 + 0.5 - p.mean2d.y;
                let [a, b, c] = p.conic;
                let m = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
                if (m - k2).abs() < band {
                    mask[y * cam.width + x] = true;
                }
            }
        }
    }
    mask
}

pub fn random_loss_grad(rng: &mut ChaCha8Rng, cam: &CameraPose, mask: &[bool]) -> RgbImage {
    let mut g = RgbImage::new(cam.width, cam.height);
    for (k, v) in g.data.iter_mut().enumerate() {
        let r: f64 = rng.random_range(-1.0..1.0);
        *v = if mask[k / 3] { 0.0 } else { r };
    }
    g
}

pub fn weighted_loss(scene: &GaussianScene, cam: &CameraPose, bg: [f64; 3], lg: &RgbImage) -> f64 {
    let img = render(scene, cam, bg, &RenderSettings::default()).unwrap();
    img.rgb.data.iter().zip(&lg.data).map(|(a, b)| a * b).sum()
}

pub struct GradCheck {
    pub max_rel: f64,
    pub checked: usize,
    pub worst: String,
}

/// Central differences on every flat parameter against the analytic adjoint.
pub fn check_render_gradients(scene: &GaussianScene, cam: &CameraPose, bg: [f64; 3], lg: &RgbImage, h: f64) -> GradCheck {
    let (_, trace) = render_with_trace(scene, cam, bg, &RenderSettings::default()).unwrap();
    let analytic = backward_from_trace(scene, &trace, lg).unwrap().to_flat();
    let base = scene.params();
    let mut probe = scene.clone();
    let mut out = GradCheck { max_rel: 0.0, checked: 0, worst: String::new() };
    for k in 0..base.len() {
        let mut p = base.clone();
        p[k] = base[k] + h;
        probe.set_params(&p);
        let fp = weighted_loss(&probe, cam, bg, lg);
        p[k] = base[k] - h;
        probe.set_params(&p);
        let fm = weighted_loss(&probe, cam, bg, lg);
        let fd = (fp - fm) / (2.0 * h);
        let a = analytic[k];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        out.checked += 1;
        if rel > out.max_rel {
            out.max_rel = rel;
            out.worst = format!("param {k} (gaussian {}, slot {}): analytic {a:e} fd {fd:e}", k / 14, k % 14);
        }
    }
    out
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_gray(rng: &mut ChaCha8Rng, w: usize, h: usize) -> GrayImage {
    GrayImage::new(w, h, (0..w * h).map(|_| rng.random::<f64>()).collect()).unwrap()
}

/// Straight transcription of the double integral as a Riemann sum.
pub fn naive_moment(img: &GrayImage, p: i32, q: i32) -> f64 {
    let mut s = 0.0;
    for j in 0..img.height {
        for i in 0..img.width {
            let x = (i as f64 + 0.5) / img.width as f64;
            let y = (j as f64 + 0.5) / img.height as f64;
            s += x.powi(p) * y.powi(q) * img.get(i, j) / (img.width * img.height) as f64;
        }
    }
    s
}

/// Smooth asymmetric blob: an off-center ellipse plus a small lobe.
pub fn blob(size: usize, angle: f64) -> GrayImage {
    let mut data = vec![0.0; size * size];
    let (s, c) = angle.sin_cos();
    for j in 0..size {
        for i in 0..size {
            // Sample position relative to the image center, rotated by -angle.
            let x = (i as f64 + 0.5) / size as f64 - 0.5;
            let y = (j as f64 + 0.5) / size as f64 - 0.5;
            let (u, v) = (c * x + s * y, -s * x + c * y);
            let e = ((u - 0.03) / 0.2).powi(2) + ((v + 0.02) / 0.1).powi(2);
            let lobe = ((u - 0.16) / 0.07).powi(2) + ((v - 0.08) / 0.07).powi(2);
            data[j * size + i] = (-2.0 * e).exp() + 0.8 * (-2.0 * lobe).exp();
        }
    }
    GrayImage::new(size, size, data).unwrap()
}

pub fn bilinear_rotate(img: &GrayImage, angle: f64) -> GrayImage {
    let n = img.width;
    let (s, c) = angle.sin_cos();
    let center = n as f64 / 2.0;
    let mut out = GrayImage::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            let x = i as f64 + 0.5 - center;
            let y = j as f64 + 0.5 - center;
            let sx = c * x + s * y + center - 0.5;
            let sy = -s * x + c * y + center - 0.5;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let at = |xx: f64, yy: f64| {
                if xx < 0.0 || yy < 0.0 || xx >= n as f64 || yy >= n as f64 {
                    0.0
                } else {
                    img.get(xx as usize, yy as usize)
                }
            };
            out.data[j * n + i] = at(x0, y0) * (1.0 - fx) * (1.0 - fy)
                + at(x0 + 1.0, y0) * fx * (1.0 - fy)
                + at(x0, y0 + 1.0) * (1.0 - fx) * fy
                + at(x0 + 1.0, y0 + 1.0) * fx * fy;
        }
    }
    out
}
