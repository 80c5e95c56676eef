//! Minimal dense NCHW tensor. Everything in the network is 4-D; single-chip
//! data uses n = 1.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_data(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "tensor ({n},{c},{h},{w}) needs {} values, got {}",
                n * c * h * w,
                data.len()
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(n, c, y, x);
        self.data[i] = v;
    }

    /// Borrow sample `n` as a (c,h,w) view flattened to a slice.
    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.c * self.h * self.w;
        &self.data[n * len..(n + 1) * len]
    }

    /// Single-sample tensor copied out of a batch.
    pub fn sample_tensor(&self, n: usize) -> Tensor {
        Tensor {
            n: 1,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.sample(n).to_vec(),
        }
    }

    /// Select a contiguous run of channels from every sample.
    pub fn select_channels(&self, channels: &[usize]) -> Tensor {
        let plane = self.h * self.w;
        let mut data = Vec::with_capacity(self.n * channels.len() * plane);
        for n in 0..self.n {
            for &c in channels {
                let base = (n * self.c + c) * plane;
                data.extend_from_slice(&self.data[base..base + plane]);
            }
        }
        Tensor {
            n: self.n,
            c: channels.len(),
            h: self.h,
            w: self.w,
            data,
        }
    }

    /// Stack single-sample tensors into a batch.
    pub fn stack(samples: &[Tensor]) -> Result<Tensor> {
        let first = samples
            .first()
            .ok_or_else(|| Error::ShapeMismatch("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(samples.len() * first.data.len());
        for s in samples {
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) || s.n != 1 {
                return Err(Error::ShapeMismatch("ragged stack".into()));
            }
            data.extend_from_slice(&s.data);
        }
        Ok(Tensor {
            n: samples.len(),
            c: first.c,
            h: first.h,
            w: first.w,
            data,
        })
    }
}
