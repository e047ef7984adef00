//! Image moments and the multi-scale moment feature stack.
//!
//! Pixel `(i, j)` of a `W x H` image sits at `((i + 0.5) / W, (j + 0.5) / H)`
//! in the unit square and carries area `1 / (W H)`.

pub mod stack;

use crate::error::{Error, Result};

pub use stack::{dgm_backward, dgm_features, moment_loss, moment_loss_rgb, DgmConfig, MomentFeatureStack};

/// Highest supported moment order; larger orders are badly conditioned.
pub const MAX_ORDER: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::contract(format!(
                "grayscale buffer of length {} does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Quarter turn: pixel `(x, y)` moves to `(H - 1 - y, x)`.
    pub fn rotate90(&self) -> GrayImage {
        let (w, h) = (self.width, self.height);
        let mut out = GrayImage::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                out.data[x * h + (h - 1 - y)] = self.get(x, y);
            }
        }
        out
    }
}

pub fn moment_count(order: usize) -> usize {
    (order + 1) * (order + 2) / 2
}

/// Position of `(p, q)` in the packed layout, grouped by total order.
pub fn moment_index(p: usize, q: usize) -> usize {
    let k = p + q;
    k * (k + 1) / 2 + q
}

/// Moments `m_pq` for `p + q <= order`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentVector {
    pub order: usize,
    pub values: Vec<f64>,
}

impl MomentVector {
    pub fn zeros(order: usize) -> Self {
        Self {
            order,
            values: vec![0.0; moment_count(order)],
        }
    }

    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.values[moment_index(p, q)]
    }

    pub fn pairs(order: usize) -> impl Iterator<Item = (usize, usize)> {
        (0..=order).flat_map(|k| (0..=k).map(move |q| (k - q, q)))
    }
}

fn check_order(order: usize) -> Result<()> {
    if order > MAX_ORDER {
        return Err(Error::config(format!(
            "moment order {order} exceeds the supported maximum of {MAX_ORDER}"
        )));
    }
    Ok(())
}

fn check_finite(img: &GrayImage) -> Result<()> {
    if img.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("image contains non-finite values"));
    }
    Ok(())
}

fn powers(v: f64, order: usize) -> [f64; MAX_ORDER + 1] {
    let mut out = [0.0; MAX_ORDER + 1];
    out[0] = 1.0;
    for k in 1..=order {
        out[k] = out[k - 1] * v;
    }
    out
}

/// Accumulates `sum f (x - cx)^p (y - cy)^q` weighted by the pixel area.
fn moment_sum(img: &GrayImage, order: usize, cx: f64, cy: f64) -> MomentVector {
    let (w, h) = (img.width, img.height);
    let area = 1.0 / (w * h) as f64;
    let mut out = MomentVector::zeros(order);
    for y in 0..h {
        let yp = powers((y as f64 + 0.5) / h as f64 - cy, order);
        for x in 0..w {
            let f = img.data[y * w + x];
            if f == 0.0 {
                continue;
            }
            let xp = powers((x as f64 + 0.5) / w as f64 - cx, order);
            for (p, q) in MomentVector::pairs(order) {
                out.values[moment_index(p, q)] += f * xp[p] * yp[q];
            }
        }
    }
    for v in out.values.iter_mut() {
        *v *= area;
    }
    out
}

pub fn raw_moments(img: &GrayImage, order: usize) -> Result<MomentVector> {
    check_order(order)?;
    check_finite(img)?;
    Ok(moment_sum(img, order, 0.0, 0.0))
}

/// Moments about the centroid.
pub fn central_moments(img: &GrayImage, order: usize) -> Result<MomentVector> {
    check_order(order)?;
    check_finite(img)?;
    let first = moment_sum(img, 1, 0.0, 0.0);
    let m00 = first.get(0, 0);
    if !(m00 > 0.0) {
        return Err(Error::Degenerate("image has no mass (m00 = 0)".into()));
    }
    Ok(moment_sum(img, order, first.get(1, 0) / m00, first.get(0, 1) / m00))
}

/// Scale-normalized central moments `mu_pq / m00^(1 + (p + q) / 2)`.
pub fn normalized_central_moments(img: &GrayImage, order: usize) -> Result<MomentVector> {
    let mu = central_moments(img, order)?;
    Ok(normalize(&mu))
}

pub(crate) fn normalize(mu: &MomentVector) -> MomentVector {
    let m00 = mu.get(0, 0);
    let mut eta = MomentVector::zeros(mu.order);
    for (p, q) in MomentVector::pairs(mu.order) {
        let gamma = 1.0 + (p + q) as f64 / 2.0;
        eta.values[moment_index(p, q)] = mu.get(p, q) / m00.powf(gamma);
    }
    eta
}

pub fn hu_invariants(img: &GrayImage) -> Result<[f64; 7]> {
    Ok(hu_from_eta(&normalized_central_moments(img, 3)?))
}

/// The seven Hu invariants from normalized central moments of order >= 3.
pub fn hu_from_eta(eta: &MomentVector) -> [f64; 7] {
    let n = |p, q| eta.get(p, q);
    let (n20, n02, n11) = (n(2, 0), n(0, 2), n(1, 1));
    let (n30, n03, n21, n12) = (n(3, 0), n(0, 3), n(2, 1), n(1, 2));
    let a = n30 + n12;
    let b = n21 + n03;
    let c = n30 - 3.0 * n12;
    let d = 3.0 * n21 - n03;
    [
        n20 + n02,
        (n20 - n02).powi(2) + 4.0 * n11 * n11,
        c * c + d * d,
        a * a + b * b,
        c * a * (a * a - 3.0 * b * b) + d * b * (3.0 * a * a - b * b),
        (n20 - n02) * (a * a - b * b) + 4.0 * n11 * a * b,
        d * a * (a * a - 3.0 * b * b) - c * b * (3.0 * a * a - b * b),
    ]
}
