//! Real-valued batch tensors used on the training path.

use crate::binmath::BitTensor;
use crate::error::{dim_err, Result};

/// A batch of `n` samples, each an `[h, w, c]` block stored contiguously.
/// Vectors use `h = w = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Act {
    pub n: usize,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Act {
    pub fn zeros(n: usize, dims: [usize; 3]) -> Self {
        Act {
            n,
            dims,
            data: vec![0.0; n * dims.iter().product::<usize>()],
        }
    }

    pub fn from_vec(n: usize, dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != n * dims.iter().product::<usize>() {
            return dim_err(format!("{} values do not fill {n} x {dims:?}", data.len()));
        }
        Ok(Act { n, dims, data })
    }

    /// Stacks ±1 tensors of equal length into a batch.
    pub fn from_bits(samples: &[BitTensor], dims: [usize; 3]) -> Result<Self> {
        let per: usize = dims.iter().product();
        let mut data = Vec::with_capacity(samples.len() * per);
        for s in samples {
            if s.len() != per {
                return dim_err(format!("sample of {} bits, expected {per}", s.len()));
            }
            data.extend((0..per).map(|i| if s.bit(i) { 1.0 } else { -1.0 }));
        }
        Ok(Act {
            n: samples.len(),
            dims,
            data,
        })
    }

    /// Per-sample element count.
    #[inline]
    pub fn per(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn sample(&self, i: usize) -> &[f64] {
        let p = self.per();
        &self.data[i * p..(i + 1) * p]
    }

    #[inline]
    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let p = self.per();
        &mut self.data[i * p..(i + 1) * p]
    }

    pub fn channels(&self) -> usize {
        self.dims[2]
    }

    /// Binarizes one sample with `x >= 0 -> +1`.
    pub fn sample_bits(&self, i: usize) -> BitTensor {
        let s = self.sample(i);
        let shape: Vec<usize> = if self.dims[0] == 1 && self.dims[1] == 1 {
            vec![self.dims[2]]
        } else {
            self.dims.to_vec()
        };
        BitTensor::from_fn(&shape, |k| s[k] >= 0.0)
    }

    /// Concatenates batches along the sample axis.
    pub fn stack(parts: &[&Act]) -> Result<Act> {
        let Some(first) = parts.first() else {
            return dim_err("nothing to stack");
        };
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.dims != first.dims {
                return dim_err("stacked batches differ in shape");
            }
            data.extend_from_slice(&p.data);
            n += p.n;
        }
        Ok(Act {
            n,
            dims: first.dims,
            data,
        })
    }

    /// Samples `range` as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> Act {
        let p = self.per();
        Act {
            n: end - start,
            dims: self.dims,
            data: self.data[start * p..end * p].to_vec(),
        }
    }

    /// Splits channels of every pixel at `at`.
    pub fn split_channels(&self, at: usize) -> (Act, Act) {
        let [h, w, c] = self.dims;
        let mut a = Act::zeros(self.n, [h, w, at]);
        let mut b = Act::zeros(self.n, [h, w, c - at]);
        for (pix, src) in self.data.chunks_exact(c).enumerate() {
            a.data[pix * at..(pix + 1) * at].copy_from_slice(&src[..at]);
            b.data[pix * (c - at)..(pix + 1) * (c - at)].copy_from_slice(&src[at..]);
        }
        (a, b)
    }

    /// Concatenates channels of two batches with matching spatial dims.
    pub fn concat_channels(a: &Act, b: &Act) -> Act {
        let [h, w, ca] = a.dims;
        let cb = b.dims[2];
        let c = ca + cb;
        let mut out = Act::zeros(a.n, [h, w, c]);
        for (pix, dst) in out.data.chunks_exact_mut(c).enumerate() {
            dst[..ca].copy_from_slice(&a.data[pix * ca..(pix + 1) * ca]);
            dst[ca..].copy_from_slice(&b.data[pix * cb..(pix + 1) * cb]);
        }
        out
    }

    /// Output channel `j` takes input channel `perm[j]`.
    pub fn permute_channels(&self, perm: &[usize]) -> Act {
        let c = self.dims[2];
        let mut out = Act::zeros(self.n, self.dims);
        for (src, dst) in self.data.chunks_exact(c).zip(out.data.chunks_exact_mut(c)) {
            for (j, &p) in perm.iter().enumerate() {
                dst[j] = src[p];
            }
        }
        out
    }
}
