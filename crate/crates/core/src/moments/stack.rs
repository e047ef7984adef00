//! Multi-scale windowed moment features and the loss built on them.
//!
//! The luminance image is average-pooled into a pyramid. On every level a
//! `grid x grid` lattice of windows, each two lattice cells wide so that
//! neighbours overlap by half, collects normalized central moments. Window
//! edges are placed in unit-square coordinates and pixels straddling an edge
//! contribute in proportion to their covered area, which keeps the lattice
//! symmetric under quarter turns for any image size.

use serde::{Deserialize, Serialize};

use super::{moment_count, moment_index, MomentVector, MAX_ORDER};
use crate::error::{Error, Result};
use crate::render::{RenderedImage, RgbImage, LUMA};

/// Windows with less mass than this emit zero features.
pub const DEGENERATE_MASS: f64 = 1e-8;

const MAGIC: &[u8; 4] = b"DGMF";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgmConfig {
    pub levels: usize,
    pub order: usize,
    pub grid: usize,
}

impl Default for DgmConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            order: 4,
            grid: 4,
        }
    }
}

impl DgmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.grid == 0 {
            return Err(Error::config("moment stack needs at least one level and one window"));
        }
        if self.order > MAX_ORDER {
            return Err(Error::config(format!(
                "moment order {} exceeds the supported maximum of {MAX_ORDER}",
                self.order
            )));
        }
        Ok(())
    }

    pub fn feature_len(&self) -> usize {
        self.levels * self.grid * self.grid * moment_count(self.order)
    }

    /// Sizes of every pyramid level, finest first.
    pub fn level_sizes(&self, width: usize, height: usize) -> Result<Vec<(usize, usize)>> {
        self.validate()?;
        let mut sizes = vec![(width, height)];
        for _ in 1..self.levels {
            let (w, h) = *sizes.last().unwrap();
            sizes.push((w / 2, h / 2));
        }
        let (w, h) = *sizes.last().unwrap();
        if w < self.grid + 1 || h < self.grid + 1 {
            return Err(Error::config(format!(
                "image {width}x{height} is too small for {} pyramid levels with a {}x{} window grid",
                self.levels, self.grid, self.grid
            )));
        }
        Ok(sizes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentFeatureStack {
    pub config: DgmConfig,
    pub values: Vec<f64>,
}

impl MomentFeatureStack {
    /// Normalized central moments of one window.
    pub fn window(&self, level: usize, gx: usize, gy: usize) -> MomentVector {
        let c = moment_count(self.config.order);
        let g = self.config.grid;
        let start = ((level * g + gy) * g + gx) * c;
        MomentVector {
            order: self.config.order,
            values: self.values[start..start + c].to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.values.len());
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.config.levels as u32,
            self.config.order as u32,
            self.config.grid as u32,
            self.config.grid as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::invalid(format!("moment stack file: {m}"));
        if bytes.len() < 32 || &bytes[..4] != MAGIC {
            return Err(bad("missing header"));
        }
        let u32_at = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().unwrap());
        if u32_at(4) != VERSION {
            return Err(bad("unsupported version"));
        }
        let (levels, order, gx, gy) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
        if gx != gy {
            return Err(bad("only square window grids are supported"));
        }
        let count = u64::from_le_bytes(bytes[24..32].try_into().unwrap()) as usize;
        let config = DgmConfig {
            levels: levels as usize,
            order: order as usize,
            grid: gx as usize,
        };
        config.validate()?;
        if count != config.feature_len() || bytes.len() != 32 + 8 * count {
            return Err(bad("length does not match header"));
        }
        let values = bytes[32..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { config, values })
    }
}

struct Level {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

fn pyramid(image: &RgbImage, sizes: &[(usize, usize)]) -> Vec<Level> {
    let mut levels = vec![Level {
        width: image.width,
        height: image.height,
        data: image.luminance(),
    }];
    for &(w, h) in &sizes[1..] {
        let prev = levels.last().unwrap();
        let mut data = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let s = prev.data[(2 * y) * prev.width + 2 * x]
                    + prev.data[(2 * y) * prev.width + 2 * x + 1]
                    + prev.data[(2 * y + 1) * prev.width + 2 * x]
                    + prev.data[(2 * y + 1) * prev.width + 2 * x + 1];
                data[y * w + x] = 0.25 * s;
            }
        }
        levels.push(Level {
            width: w,
            height: h,
            data,
        });
    }
    levels
}

/// Pixels overlapping window `k` along one axis with their covered fraction.
fn coverage(k: usize, grid: usize, n: usize) -> Vec<(usize, f64)> {
    let cells = (grid + 1) as f64;
    let lo = k as f64 * n as f64 / cells;
    let hi = (k + 2) as f64 * n as f64 / cells;
    let first = lo.floor() as usize;
    let last = (hi.ceil() as usize).min(n);
    (first..last)
        .filter_map(|i| {
            let c = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).clamp(0.0, 1.0);
            (c > 0.0).then_some((i, c))
        })
        .collect()
}

/// Per-window moment state kept for the backward pass.
struct WindowStats {
    m00: f64,
    cx: f64,
    cy: f64,
    mu: MomentVector,
}

fn window_stats(
    lvl: &Level,
    xs: &[(usize, f64)],
    ys: &[(usize, f64)],
    order: usize,
) -> Option<WindowStats> {
    let area = 1.0 / (lvl.width * lvl.height) as f64;
    let (mut m00, mut m10, mut m01) = (0.0, 0.0, 0.0);
    for &(y, cy) in ys {
        let yc = (y as f64 + 0.5) / lvl.height as f64;
        for &(x, cx) in xs {
            let f = lvl.data[y * lvl.width + x] * cx * cy * area;
            let xc = (x as f64 + 0.5) / lvl.width as f64;
            m00 += f;
            m10 += f * xc;
            m01 += f * yc;
        }
    }
    if !(m00 >= DEGENERATE_MASS) {
        return None;
    }
    let (cx0, cy0) = (m10 / m00, m01 / m00);
    let mut mu = MomentVector::zeros(order);
    for &(y, cy) in ys {
        let dy = (y as f64 + 0.5) / lvl.height as f64 - cy0;
        let yp = pow_table(dy, order);
        for &(x, cx) in xs {
            let f = lvl.data[y * lvl.width + x] * cx * cy * area;
            if f == 0.0 {
                continue;
            }
            let xp = pow_table((x as f64 + 0.5) / lvl.width as f64 - cx0, order);
            for (p, q) in MomentVector::pairs(order) {
                mu.values[moment_index(p, q)] += f * xp[p] * yp[q];
            }
        }
    }
    Some(WindowStats {
        m00,
        cx: cx0,
        cy: cy0,
        mu,
    })
}

fn pow_table(v: f64, order: usize) -> [f64; MAX_ORDER + 1] {
    let mut out = [0.0; MAX_ORDER + 1];
    out[0] = 1.0;
    for k in 1..=order {
        out[k] = out[k - 1] * v;
    }
    out
}

fn check_image(image: &RgbImage) -> Result<()> {
    if image.data.len() != image.width * image.height * 3 {
        return Err(Error::contract("rgb buffer does not match its dimensions"));
    }
    if image.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("image contains non-finite values"));
    }
    Ok(())
}

pub fn dgm_features(image: &RgbImage, config: &DgmConfig) -> Result<MomentFeatureStack> {
    check_image(image)?;
    let sizes = config.level_sizes(image.width, image.height)?;
    let levels = pyramid(image, &sizes);
    let c = moment_count(config.order);
    let g = config.grid;
    let mut values = vec![0.0; config.feature_len()];
    for (l, lvl) in levels.iter().enumerate() {
        for gy in 0..g {
            let ys = coverage(gy, g, lvl.height);
            for gx in 0..g {
                let xs = coverage(gx, g, lvl.width);
                let start = ((l * g + gy) * g + gx) * c;
                if let Some(st) = window_stats(lvl, &xs, &ys, config.order) {
                    let eta = super::normalize(&st.mu);
                    values[start..start + c].copy_from_slice(&eta.values);
                }
            }
        }
    }
    Ok(MomentFeatureStack {
        config: *config,
        values,
    })
}

/// Pulls a gradient on the feature vector back to the RGB pixels.
pub fn dgm_backward(image: &RgbImage, config: &DgmConfig, grad: &[f64]) -> Result<RgbImage> {
    check_image(image)?;
    if grad.len() != config.feature_len() {
        return Err(Error::contract(format!(
            "feature gradient has length {} but the stack has {}",
            grad.len(),
            config.feature_len()
        )));
    }
    let sizes = config.level_sizes(image.width, image.height)?;
    let levels = pyramid(image, &sizes);
    let order = config.order;
    let c = moment_count(order);
    let g = config.grid;
    let mut level_grads: Vec<Vec<f64>> = levels.iter().map(|l| vec![0.0; l.data.len()]).collect();
    for (l, lvl) in levels.iter().enumerate() {
        let area = 1.0 / (lvl.width * lvl.height) as f64;
        for gy in 0..g {
            let ys = coverage(gy, g, lvl.height);
            for gx in 0..g {
                let start = ((l * g + gy) * g + gx) * c;
                let ge = &grad[start..start + c];
                if ge.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let xs = coverage(gx, g, lvl.width);
                let Some(st) = window_stats(lvl, &xs, &ys, order) else {
                    continue;
                };
                // d eta_pq / d f_k = w_k [sum A dx^p dy^q + bx dx + by dy + c0]
                let mut a = vec![0.0; c];
                let (mut bx, mut by, mut c0) = (0.0, 0.0, 0.0);
                for (p, q) in MomentVector::pairs(order) {
                    let gamma = 1.0 + (p + q) as f64 / 2.0;
                    let ge_pq = ge[moment_index(p, q)];
                    if ge_pq == 0.0 {
                        continue;
                    }
                    let scale = st.m00.powf(-gamma);
                    a[moment_index(p, q)] = ge_pq * scale;
                    let s1 = ge_pq * scale / st.m00;
                    if p > 0 {
                        bx -= s1 * p as f64 * st.mu.get(p - 1, q);
                    }
                    if q > 0 {
                        by -= s1 * q as f64 * st.mu.get(p, q - 1);
                    }
                    c0 -= s1 * gamma * st.mu.get(p, q);
                }
                let lg = &mut level_grads[l];
                for &(y, cy) in &ys {
                    let dy = (y as f64 + 0.5) / lvl.height as f64 - st.cy;
                    let yp = pow_table(dy, order);
                    for &(x, cx) in &xs {
                        let dx = (x as f64 + 0.5) / lvl.width as f64 - st.cx;
                        let xp = pow_table(dx, order);
                        let mut s = bx * dx + by * dy + c0;
                        for (p, q) in MomentVector::pairs(order) {
                            s += a[moment_index(p, q)] * xp[p] * yp[q];
                        }
                        lg[y * lvl.width + x] += cx * cy * area * s;
                    }
                }
            }
        }
    }
    // Coarse to fine through the pooling.
    for l in (1..levels.len()).rev() {
        let (w, h) = (levels[l].width, levels[l].height);
        let fine_w = levels[l - 1].width;
        let (lower, upper) = level_grads.split_at_mut(l);
        let fine = &mut lower[l - 1];
        let coarse = &upper[0];
        for y in 0..h {
            for x in 0..w {
                let v = 0.25 * coarse[y * w + x];
                fine[(2 * y) * fine_w + 2 * x] += v;
                fine[(2 * y) * fine_w + 2 * x + 1] += v;
                fine[(2 * y + 1) * fine_w + 2 * x] += v;
                fine[(2 * y + 1) * fine_w + 2 * x + 1] += v;
            }
        }
    }
    let mut out = RgbImage::new(image.width, image.height);
    for (k, v) in level_grads[0].iter().enumerate() {
        for ch in 0..3 {
            out.data[3 * k + ch] = LUMA[ch] * v;
        }
    }
    Ok(out)
}

/// `|| F(render) - F(reference) ||_2` and its gradient on the render's pixels.
pub fn moment_loss(
    render: &RenderedImage,
    reference: &RenderedImage,
    config: &DgmConfig,
) -> Result<(f64, RgbImage)> {
    moment_loss_rgb(&render.rgb, &reference.rgb, config)
}

pub fn moment_loss_rgb(render: &RgbImage, reference: &RgbImage, config: &DgmConfig) -> Result<(f64, RgbImage)> {
    render.check_shape(reference, "moment_loss reference")?;
    let a = dgm_features(render, config)?;
    let b = dgm_features(reference, config)?;
    let diff: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
    if loss == 0.0 {
        return Ok((0.0, RgbImage::new(render.width, render.height)));
    }
    let g: Vec<f64> = diff.iter().map(|d| d / loss).collect();
    Ok((loss, dgm_backward(render, config, &g)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coverage_sums_to_window_width() {
        for n in [5usize, 16, 17, 64] {
            for k in 0..4 {
                let total: f64 = coverage(k, 4, n).iter().map(|c| c.1).sum();
                assert!((total - 2.0 * n as f64 / 5.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn feature_length_formula() {
        let cfg = DgmConfig::default();
        assert_eq!(cfg.feature_len(), 3 * 16 * 15);
        let img = RgbImage::filled(64, 64, [0.5; 3]);
        assert_eq!(dgm_features(&img, &cfg).unwrap().values.len(), 720);
    }

    #[test]
    fn too_small_image_is_a_config_error() {
        let img = RgbImage::filled(16, 16, [0.5; 3]);
        assert!(matches!(dgm_features(&img, &DgmConfig::default()), Err(Error::Config(_))));
    }
}
