//! Small trainable convolutional noise predictor.
//!
//! The noisy image is folded 2x2 into channels (pixel unshuffle), joined with
//! the folded depth condition and a broadcast timestep embedding, run through
//! three 3x3 convolutions with SiLU between them, and unfolded back to RGB.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::oracle::{DiffusionSample, GuidanceCondition, ScoreOracle};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::optim::adam::{Adam, ByteReader};
use crate::render::RgbImage;
use crate::scene::PromptEmbedding;

const MAGIC: &[u8; 4] = b"GMSR";
const VERSION: u32 = 1;
const IMAGE_CHANNELS: usize = 12;
const DEPTH_CHANNELS: usize = 4;
const TIME_CHANNELS: usize = 4;
const INPUT_CHANNELS: usize = IMAGE_CHANNELS + DEPTH_CHANNELS + TIME_CHANNELS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("surrogate needs a positive width and learning rate"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layer {
    cin: usize,
    cout: usize,
    offset: usize,
}

impl Layer {
    fn weight_len(&self) -> usize {
        self.cout * self.cin * 9
    }

    fn len(&self) -> usize {
        self.weight_len() + self.cout
    }
}

fn layers(hidden: usize) -> [Layer; 3] {
    let dims = [(INPUT_CHANNELS, hidden), (hidden, hidden), (hidden, IMAGE_CHANNELS)];
    let mut offset = 0;
    dims.map(|(cin, cout)| {
        let l = Layer { cin, cout, offset };
        offset += l.len();
        l
    })
}

/// 3x3 convolution with zero padding; planes are `c x (h * w)`.
fn conv_forward(l: &Layer, params: &[f64], input: &[f64], h: usize, w: usize) -> Vec<f64> {
    let n = h * w;
    let wts = &params[l.offset..l.offset + l.weight_len()];
    let bias = &params[l.offset + l.weight_len()..l.offset + l.len()];
    let mut out = vec![0.0; l.cout * n];
    for o in 0..l.cout {
        let dst = &mut out[o * n..(o + 1) * n];
        dst.fill(bias[o]);
        for i in 0..l.cin {
            let src = &input[i * n..(i + 1) * n];
            for ky in 0..3 {
                let (y0, y1) = tap_range(ky, h);
                for kx in 0..3 {
                    let wv = wts[((o * l.cin + i) * 3 + ky) * 3 + kx];
                    let (x0, x1) = tap_range(kx, w);
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let d = &mut dst[y * w + x0..y * w + x1];
                        let s = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                        for (a, b) in d.iter_mut().zip(s) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output positions whose tap `k` lands inside `0..n`.
#[inline]
fn tap_range(k: usize, n: usize) -> (usize, usize) {
    match k {
        0 => (1, n),
        1 => (0, n),
        _ => (0, n.saturating_sub(1)),
    }
}

/// Accumulates parameter gradients and, when asked, the input gradient.
fn conv_backward(
    l: &Layer,
    params: &[f64],
    input: &[f64],
    h: usize,
    w: usize,
    dout: &[f64],
    grads: &mut [f64],
    mut din: Option<&mut [f64]>,
) {
    let n = h * w;
    let wl = l.weight_len();
    for o in 0..l.cout {
        let g = &dout[o * n..(o + 1) * n];
        grads[l.offset + wl + o] += g.iter().sum::<f64>();
        for i in 0..l.cin {
            let src = &input[i * n..(i + 1) * n];
            for ky in 0..3 {
                let (y0, y1) = tap_range(ky, h);
                for kx in 0..3 {
                    let (x0, x1) = tap_range(kx, w);
                    let widx = ((o * l.cin + i) * 3 + ky) * 3 + kx;
                    let wv = params[l.offset + widx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let gr = &g[y * w + x0..y * w + x1];
                        let sr = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                        acc += gr.iter().zip(sr).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(d) = din.as_deref_mut() {
                            let dr = &mut d[i * n + sy * w + x0 + kx - 1..i * n + sy * w + x1 + kx - 1];
                            for (a, b) in dr.iter_mut().zip(gr) {
                                *a += wv * b;
                            }
                        }
                    }
                    grads[l.offset + widx] += acc;
                }
            }
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| v * sigmoid(v)).collect()
}

fn silu_backward(z: &[f64], g: &mut [f64]) {
    for (gv, &v) in g.iter_mut().zip(z) {
        let s = sigmoid(v);
        *gv *= s * (1.0 + v * (1.0 - s));
    }
}

/// Four-channel sinusoidal embedding of `t / timesteps`.
pub fn time_embedding(t: u32, timesteps: u32) -> [f64; TIME_CHANNELS] {
    let tau = std::f64::consts::PI * t as f64 / timesteps as f64;
    [tau.sin(), tau.cos(), (8.0 * tau).sin(), (8.0 * tau).cos()]
}

struct Activations {
    h: usize,
    w: usize,
    x0: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    out: Vec<f64>,
}

/// Trainable predictor `(r_t, depth, t) -> noise` with its own Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSurrogate {
    pub config: SurrogateConfig,
    pub timesteps: u32,
    params: Vec<f64>,
    adam: Adam,
    /// Training steps taken.
    pub steps: u64,
}

impl NoiseSurrogate {
    pub fn new(config: SurrogateConfig, timesteps: u32) -> Result<Self> {
        config.validate()?;
        if timesteps == 0 {
            return Err(Error::config("surrogate needs a positive timestep count"));
        }
        let ls = layers(config.hidden);
        let total = ls.iter().map(Layer::len).sum();
        let mut params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        // The output layer starts at zero so the untrained surrogate predicts 0.
        for l in &ls[..2] {
            let std = (2.0 / (l.cin * 9) as f64).sqrt();
            for p in &mut params[l.offset..l.offset + l.weight_len()] {
                *p = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(Self {
            config,
            timesteps,
            adam: Adam::new(total),
            params,
            steps: 0,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::contract("surrogate parameter count mismatch"));
        }
        self.params = params;
        Ok(())
    }

    fn input(&self, noisy: &RgbImage, depth: Option<&[f64]>, t: u32) -> Result<(Vec<f64>, usize, usize)> {
        let (w, h) = (noisy.width, noisy.height);
        if w % 2 != 0 || h % 2 != 0 || w == 0 || h == 0 {
            return Err(Error::invalid(format!("surrogate needs even image sides, got {w}x{h}")));
        }
        if let Some(d) = depth {
            if d.len() != w * h {
                return Err(Error::contract("depth condition does not match the image"));
            }
        }
        let (h2, w2) = (h / 2, w / 2);
        let n = h2 * w2;
        let mut x = vec![0.0; INPUT_CHANNELS * n];
        for yy in 0..h2 {
            for xx in 0..w2 {
                let q = yy * w2 + xx;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let p = (2 * yy + dy) * w + 2 * xx + dx;
                        let s = dy * 2 + dx;
                        for c in 0..3 {
                            x[(c * 4 + s) * n + q] = noisy.data[3 * p + c];
                        }
                        if let Some(d) = depth {
                            x[(IMAGE_CHANNELS + s) * n + q] = d[p];
                        }
                    }
                }
            }
        }
        let emb = time_embedding(t, self.timesteps);
        for (k, e) in emb.iter().enumerate() {
            x[(IMAGE_CHANNELS + DEPTH_CHANNELS + k) * n..(IMAGE_CHANNELS + DEPTH_CHANNELS + k + 1) * n].fill(*e);
        }
        Ok((x, h2, w2))
    }

    fn forward(&self, noisy: &RgbImage, depth: Option<&[f64]>, t: u32) -> Result<Activations> {
        let (x0, h, w) = self.input(noisy, depth, t)?;
        let ls = layers(self.config.hidden);
        let z1 = conv_forward(&ls[0], &self.params, &x0, h, w);
        let a1 = silu(&z1);
        let z2 = conv_forward(&ls[1], &self.params, &a1, h, w);
        let a2 = silu(&z2);
        let out = conv_forward(&ls[2], &self.params, &a2, h, w);
        Ok(Activations {
            h,
            w,
            x0,
            z1,
            a1,
            z2,
            a2,
            out,
        })
    }

    /// Folds the 12 output channels back into an RGB image.
    fn unshuffle_out(planes: &[f64], h2: usize, w2: usize) -> RgbImage {
        let (w, h) = (2 * w2, 2 * h2);
        let n = h2 * w2;
        let mut img = RgbImage::new(w, h);
        for yy in 0..h2 {
            for xx in 0..w2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let p = (2 * yy + dy) * w + 2 * xx + dx;
                        for c in 0..3 {
                            img.data[3 * p + c] = planes[(c * 4 + dy * 2 + dx) * n + yy * w2 + xx];
                        }
                    }
                }
            }
        }
        img
    }

    /// Inverse of [`Self::unshuffle_out`] for gradients.
    fn shuffle_grad(img: &RgbImage) -> Vec<f64> {
        let (w2, h2) = (img.width / 2, img.height / 2);
        let n = h2 * w2;
        let mut planes = vec![0.0; IMAGE_CHANNELS * n];
        for yy in 0..h2 {
            for xx in 0..w2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let p = (2 * yy + dy) * img.width + 2 * xx + dx;
                        for c in 0..3 {
                            planes[(c * 4 + dy * 2 + dx) * n + yy * w2 + xx] = img.data[3 * p + c];
                        }
                    }
                }
            }
        }
        planes
    }

    pub fn predict_noise(&self, noisy: &RgbImage, depth: Option<&[f64]>, t: u32) -> Result<RgbImage> {
        let act = self.forward(noisy, depth, t)?;
        Ok(Self::unshuffle_out(&act.out, act.h, act.w))
    }

    /// Mean squared noise error over the batch and its parameter gradient.
    pub fn loss_and_grad(&self, batch: &[SurrogateExample]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::invalid("surrogate batch is empty"));
        }
        let ls = layers(self.config.hidden);
        let mut grads = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for ex in batch {
            let s = &ex.sample;
            let act = self.forward(&s.noisy, ex.depth.as_deref(), s.t)?;
            let pred = Self::unshuffle_out(&act.out, act.h, act.w);
            let scale = 1.0 / (pred.data.len() * batch.len()) as f64;
            let diff = pred.axpby(1.0, &s.noise, -1.0);
            loss += diff.data.iter().map(|d| d * d).sum::<f64>() * scale;
            let dout = Self::shuffle_grad(&diff.scaled(2.0 * scale));
            let (h, w) = (act.h, act.w);
            let mut da2 = vec![0.0; act.a2.len()];
            conv_backward(&ls[2], &self.params, &act.a2, h, w, &dout, &mut grads, Some(&mut da2));
            silu_backward(&act.z2, &mut da2);
            let mut da1 = vec![0.0; act.a1.len()];
            conv_backward(&ls[1], &self.params, &act.a1, h, w, &da2, &mut grads, Some(&mut da1));
            silu_backward(&act.z1, &mut da1);
            conv_backward(&ls[0], &self.params, &act.x0, h, w, &da1, &mut grads, None);
        }
        Ok((loss, grads))
    }

    pub fn loss(&self, batch: &[SurrogateExample]) -> Result<f64> {
        Ok(self.loss_and_grad(batch)?.0)
    }

    /// One Adam step on a fixed batch; returns the loss before the step.
    pub fn train_on(&mut self, batch: &[SurrogateExample]) -> Result<f64> {
        let (loss, grads) = self.loss_and_grad(batch)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                step: self.steps,
                detail: "surrogate loss or gradient is not finite".into(),
            });
        }
        self.adam.step(&mut self.params, &grads, self.config.learning_rate);
        self.steps += 1;
        Ok(loss)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let ls = layers(self.config.hidden);
        out.extend_from_slice(&(ls.len() as u32).to_le_bytes());
        for l in &ls {
            for d in [l.cin, l.cout, 3] {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        out.extend_from_slice(&self.timesteps.to_le_bytes());
        out.extend_from_slice(&self.steps.to_le_bytes());
        out.extend_from_slice(&self.config.learning_rate.to_le_bytes());
        out.extend_from_slice(&self.config.seed.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        self.adam.write_bytes(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "surrogate checkpoint");
        if r.take(4)? != MAGIC {
            return Err(Error::invalid("not a surrogate checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::invalid(format!("unsupported surrogate checkpoint version {version}")));
        }
        let nl = r.u32()? as usize;
        let mut dims = Vec::with_capacity(nl);
        for _ in 0..nl {
            dims.push((r.u32()? as usize, r.u32()? as usize, r.u32()?));
        }
        let hidden = dims.first().map(|d| d.1).unwrap_or(0);
        let expect: Vec<_> = layers(hidden).iter().map(|l| (l.cin, l.cout, 3)).collect();
        if hidden == 0 || dims != expect {
            return Err(Error::invalid("surrogate checkpoint has an unsupported layer layout"));
        }
        let timesteps = r.u32()?;
        let steps = r.u64()?;
        let learning_rate = r.f64()?;
        let seed = r.u64()?;
        let n = r.u64()? as usize;
        let params = r.f64s(n)?;
        let adam = Adam::read_bytes(&mut r)?;
        r.finish()?;
        if n != layers(hidden).iter().map(Layer::len).sum::<usize>() || adam.len() != n {
            return Err(Error::invalid("surrogate checkpoint parameter count mismatch"));
        }
        Ok(Self {
            config: SurrogateConfig {
                hidden,
                learning_rate,
                seed,
            },
            timesteps,
            params,
            adam,
            steps,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

impl ScoreOracle for NoiseSurrogate {
    fn name(&self) -> &str {
        "surrogate"
    }

    fn predict(&self, sample: &DiffusionSample, cond: &GuidanceCondition, _y: &PromptEmbedding) -> Result<RgbImage> {
        self.predict_noise(&sample.noisy, cond.depth.as_deref(), sample.t)
    }
}

/// A noised image with its depth condition.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateExample {
    pub sample: DiffusionSample,
    pub depth: Option<Vec<f64>>,
}

/// A clean render and its depth condition.
#[derive(Debug, Clone, Copy)]
pub struct TrainItem<'a> {
    pub render: &'a RgbImage,
    pub depth: Option<&'a [f64]>,
}

/// One stochastic step: a timestep and fresh noise per item, in batch order.
pub fn surrogate_train_step<R: Rng + ?Sized>(
    surrogate: &mut NoiseSurrogate,
    batch: &[TrainItem<'_>],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("surrogate batch is empty"));
    }
    let examples = batch
        .iter()
        .map(|item| {
            Ok(SurrogateExample {
                sample: DiffusionSample::draw(item.render.clone(), schedule, rng)?,
                depth: item.depth.map(<[f64]>::to_vec),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    surrogate.train_on(&examples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count() {
        let s = NoiseSurrogate::new(SurrogateConfig::default(), 1000).unwrap();
        assert_eq!(s.param_count(), 20 * 16 * 9 + 16 + 16 * 16 * 9 + 16 + 16 * 12 * 9 + 12);
        assert!(s.param_count() < 50_000);
    }

    #[test]
    fn shuffle_round_trip() {
        let img = RgbImage::from_data(4, 6, (0..72).map(|v| v as f64).collect()).unwrap();
        let planes = NoiseSurrogate::shuffle_grad(&img);
        assert_eq!(NoiseSurrogate::unshuffle_out(&planes, 3, 2), img);
    }

    #[test]
    fn odd_sides_are_rejected() {
        let s = NoiseSurrogate::new(SurrogateConfig::default(), 1000).unwrap();
        assert!(s.predict_noise(&RgbImage::new(9, 8), None, 10).is_err());
    }
}
