use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.step_by(params, grads, |_| lr);
    }

    /// One update with a learning rate chosen per entry.
    pub fn step_by(&mut self, params: &mut [f64], grads: &[f64], lr: impl Fn(usize) -> f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr(i) * mh / (vh.sqrt() + self.eps);
        }
    }

    /// Keeps the moment blocks of width `block` whose flag is set.
    pub fn retain_blocks(&mut self, block: usize, keep: &[bool]) {
        let filter = |buf: &mut Vec<f64>| {
            *buf = buf
                .chunks_exact(block)
                .zip(keep)
                .filter(|(_, &k)| k)
                .flat_map(|(c, _)| c.iter().copied())
                .collect();
        };
        filter(&mut self.m);
        filter(&mut self.v);
    }

    /// Appends zeroed moments.
    pub fn extend_zeros(&mut self, len: usize) {
        self.m.resize(self.m.len() + len, 0.0);
        self.v.resize(self.v.len() + len, 0.0);
    }

    pub fn write_bytes(&self, out: &mut Vec<u8>) {
        for x in [self.beta1, self.beta2, self.eps] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.m.len() as u64).to_le_bytes());
        for x in self.m.iter().chain(&self.v) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn read_bytes(r: &mut ByteReader<'_>) -> Result<Self> {
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let eps = r.f64()?;
        let step = r.u64()?;
        let n = r.u64()? as usize;
        let m = r.f64s(n)?;
        let v = r.f64s(n)?;
        Ok(Self {
            beta1,
            beta2,
            eps,
            m,
            v,
            step,
        })
    }
}

/// Little-endian cursor over a checkpoint buffer.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::invalid(format!("{} is truncated at byte {}", self.what, self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::invalid("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn finish(&self) -> Result<()> {
        if !self.is_done() {
            return Err(Error::invalid(format!(
                "{} has {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut a = Adam::new(2);
        let mut p = vec![1.0, -1.0];
        a.step(&mut p, &[3.0, -0.5], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-8);
        assert!((p[1] + 0.9).abs() < 1e-8);
    }

    #[test]
    fn bytes_round_trip() {
        let mut a = Adam::new(3);
        a.step(&mut [0.0; 3], &[1.0, 2.0, 3.0], 0.1);
        let mut buf = Vec::new();
        a.write_bytes(&mut buf);
        let mut r = ByteReader::new(&buf, "adam");
        assert_eq!(Adam::read_bytes(&mut r).unwrap(), a);
        r.finish().unwrap();
    }

    #[test]
    fn retain_drops_blocks() {
        let mut a = Adam::new(4);
        a.m = vec![1.0, 2.0, 3.0, 4.0];
        a.retain_blocks(2, &[false, true]);
        assert_eq!(a.m, vec![3.0, 4.0]);
        assert_eq!(a.v.len(), 2);
    }
}
