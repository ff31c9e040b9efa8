//! Real-valued projector used only by the self-supervised term: two dense
//! layers, each followed by batch standardization and ReLU.

use rand::Rng;

use super::{batch_standardize, batch_standardize_backward};
use crate::error::{dim_err, Result};
use crate::qat::Param;

#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub input: usize,
    pub width: usize,
    pub w1: Param,
    pub w2: Param,
}

/// Forward values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ProjectorCache {
    b: usize,
    x: Vec<f64>,
    n1: Vec<f64>,
    inv1: Vec<f64>,
    h1: Vec<f64>,
    n2: Vec<f64>,
    inv2: Vec<f64>,
}

fn glorot(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Vec<f64> {
    let limit = (6.0 / (n_in + n_out) as f64).sqrt();
    (0..n_in * n_out).map(|_| rng.random_range(-limit..limit)).collect()
}

/// `B×n_in` times `[n_in, n_out]`.
fn matmul(x: &[f64], w: &[f64], b: usize, n_in: usize, n_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * n_out];
    for i in 0..b {
        let o = &mut out[i * n_out..(i + 1) * n_out];
        for (k, xv) in x[i * n_in..(i + 1) * n_in].iter().enumerate() {
            if *xv == 0.0 {
                continue;
            }
            for (o, w) in o.iter_mut().zip(&w[k * n_out..(k + 1) * n_out]) {
                *o += xv * w;
            }
        }
    }
    out
}

/// Accumulates `dw += xᵀ·dy` and returns `dy·wᵀ`.
fn matmul_backward(x: &[f64], w: &[f64], dy: &[f64], dw: &mut [f64], b: usize, n_in: usize, n_out: usize) -> Vec<f64> {
    let mut dx = vec![0.0; b * n_in];
    for i in 0..b {
        let d = &dy[i * n_out..(i + 1) * n_out];
        for k in 0..n_in {
            let xv = x[i * n_in + k];
            let row = k * n_out..(k + 1) * n_out;
            for (g, d) in dw[row.clone()].iter_mut().zip(d) {
                *g += xv * d;
            }
            dx[i * n_in + k] = w[row].iter().zip(d).map(|(w, d)| w * d).sum();
        }
    }
    dx
}

impl Projector {
    pub fn new(input: usize, width: usize, rng: &mut impl Rng) -> Self {
        let w1 = Param::real("projector.w1", &[input, width], glorot(input, width, rng)).expect("shape");
        let w2 = Param::real("projector.w2", &[width, width], glorot(width, width, rng)).expect("shape");
        Projector { input, width, w1, w2 }
    }

    pub fn forward(&self, x: &[f64], b: usize) -> Result<(Vec<f64>, ProjectorCache)> {
        if x.len() != b * self.input {
            return dim_err(format!("projector expects {} inputs per row", self.input));
        }
        let p = self.width;
        let a1 = matmul(x, &self.w1.proxy, b, self.input, p);
        let (n1, inv1) = batch_standardize(&a1, b, p);
        let h1: Vec<f64> = n1.iter().map(|v| v.max(0.0)).collect();
        let a2 = matmul(&h1, &self.w2.proxy, b, p, p);
        let (n2, inv2) = batch_standardize(&a2, b, p);
        let out = n2.iter().map(|v| v.max(0.0)).collect();
        let cache = ProjectorCache {
            b,
            x: x.to_vec(),
            n1,
            inv1,
            h1,
            n2,
            inv2,
        };
        Ok((out, cache))
    }

    /// Accumulates weight gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &ProjectorCache, dy: &[f64]) -> Vec<f64> {
        let (b, p) = (cache.b, self.width);
        let relu = |n: &[f64], d: &[f64]| -> Vec<f64> { n.iter().zip(d).map(|(n, d)| if *n > 0.0 { *d } else { 0.0 }).collect() };
        let dn2 = relu(&cache.n2, dy);
        let da2 = batch_standardize_backward(&cache.n2, &cache.inv2, &dn2, b, p);
        let dh1 = matmul_backward(&cache.h1, &self.w2.proxy, &da2, &mut self.w2.grad, b, p, p);
        let dn1 = relu(&cache.n1, &dh1);
        let da1 = batch_standardize_backward(&cache.n1, &cache.inv1, &dn1, b, p);
        matmul_backward(&cache.x, &self.w1.proxy, &da1, &mut self.w1.grad, b, self.input, p)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w1, &mut self.w2]
    }
}
