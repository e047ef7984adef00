use crate::error::{Error, Result};

/// Interleaved RGB float image, row-major, three values per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::contract(format!(
                "rgb buffer of length {} does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let k = 3 * (y * self.width + x);
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }

    pub fn same_shape(&self, other: &RgbImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_shape(&self, other: &RgbImage, what: &str) -> Result<()> {
        if !self.same_shape(other) || self.data.len() != other.data.len() {
            return Err(Error::contract(format!(
                "{what}: image is {}x{} but expected {}x{}",
                other.width, other.height, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Elementwise `a * self + b * other`.
    pub fn axpby(&self, a: f64, other: &RgbImage, b: f64) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rec. 601 luma.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|c| LUMA[0] * c[0] + LUMA[1] * c[1] + LUMA[2] * c[2])
            .collect()
    }
}

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Depth value stored for pixels with negligible coverage.
pub const BACKGROUND_DEPTH: f64 = f64::INFINITY;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub rgb: RgbImage,
    /// Camera-space depth per pixel, [`BACKGROUND_DEPTH`] where uncovered.
    pub depth: Vec<f64>,
    /// Accumulated opacity per pixel.
    pub alpha: Vec<f64>,
}

impl RenderedImage {
    pub fn background(width: usize, height: usize, bg: [f64; 3]) -> Self {
        Self {
            rgb: RgbImage::filled(width, height, bg),
            depth: vec![BACKGROUND_DEPTH; width * height],
            alpha: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    /// `alpha > 0.5` per pixel.
    pub fn silhouette(&self) -> Vec<bool> {
        self.alpha.iter().map(|&a| a > 0.5).collect()
    }

    /// Depth mapped to [0, 1] over the covered pixels, nearest at 1 and
    /// background at 0. A flat foreground maps to 1.
    pub fn normalized_depth(&self) -> Vec<f64> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &d in &self.depth {
            if d.is_finite() {
                lo = lo.min(d);
                hi = hi.max(d);
            }
        }
        self.depth
            .iter()
            .map(|&d| {
                if !d.is_finite() {
                    0.0
                } else if hi > lo {
                    1.0 - (d - lo) / (hi - lo)
                } else {
                    1.0
                }
            })
            .collect()
    }
}
