//! Training objectives and their gradients.
//!
//! Classification losses take a `B×C` row-major batch and return the mean
//! over the batch together with the gradient w.r.t. the logits. Class
//! weights scale each sample's term by the weight of its true class.

pub mod projector;

pub use projector::Projector;

use serde::{Deserialize, Serialize};

use crate::error::{cfg_err, dim_err, Result};

/// Lower clamp applied to probabilities inside logarithms.
pub const PROB_EPS: f64 = 1e-12;
/// Variance guard of batch standardization.
pub const STD_EPS: f64 = 1e-12;
pub const DEFAULT_NU: f64 = 2.0;
pub const DEFAULT_LAMBDA: f64 = 1e-5;

/// Inverse-frequency weights normalised to sum to the class count:
/// `w_i = C·f_i⁻¹ / Σ_j f_j⁻¹`.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return cfg_err("no classes to weight");
    }
    if let Some(i) = counts.iter().position(|c| *c == 0) {
        return cfg_err(format!("class {i} has no samples"));
    }
    let total: usize = counts.iter().sum();
    let inv: Vec<f64> = counts.iter().map(|c| total as f64 / *c as f64).collect();
    let sum: f64 = inv.iter().sum();
    let c = counts.len() as f64;
    Ok(inv.iter().map(|f| c * f / sum).collect())
}

/// Row-wise softmax of a `B×C` batch.
pub fn softmax(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

fn check(len: usize, classes: usize, labels: &[usize], weights: &[f64]) -> Result<()> {
    if classes == 0 || len != labels.len() * classes {
        return dim_err(format!("{len} values for {} rows of {classes}", labels.len()));
    }
    if weights.len() != classes {
        return dim_err(format!("{} weights for {classes} classes", weights.len()));
    }
    if let Some(l) = labels.iter().find(|l| **l >= classes) {
        return dim_err(format!("label {l} outside {classes} classes"));
    }
    Ok(())
}

/// Weighted categorical cross-entropy of probabilities.
pub fn cce(probs: &[f64], labels: &[usize], weights: &[f64]) -> Result<f64> {
    fcce(probs, labels, weights, 0.0)
}

/// Focal cross-entropy: each term is multiplied by `(1 - p)^ν`.
pub fn fcce(probs: &[f64], labels: &[usize], weights: &[f64], nu: f64) -> Result<f64> {
    let c = weights.len();
    check(probs.len(), c, labels, weights)?;
    let b = labels.len() as f64;
    let sum: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let p = probs[i * c + y];
            -weights[y] * (1.0 - p).powf(nu) * p.max(PROB_EPS).ln()
        })
        .sum();
    Ok(sum / b)
}

/// Weighted squared hinge with `±1` one-vs-all targets.
pub fn squared_hinge(logits: &[f64], targets: &[f64], weights: &[f64]) -> Result<f64> {
    let c = weights.len();
    if c == 0 || logits.len() != targets.len() || logits.len() % c != 0 {
        return dim_err("hinge inputs disagree in shape");
    }
    let b = (logits.len() / c) as f64;
    let sum: f64 = logits
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(k, (y, t))| weights[k % c] * (1.0 - y * t).max(0.0).powi(2))
        .sum();
    Ok(sum / b)
}

/// `±1` one-vs-all targets for integer labels.
pub fn pm1_targets(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut t = vec![-1.0; labels.len() * classes];
    for (i, y) in labels.iter().enumerate() {
        t[i * classes + y] = 1.0;
    }
    t
}

/// Value and logit gradient of softmax + focal cross-entropy (`ν = 0` is
/// plain cross-entropy).
pub fn fcce_logits(logits: &[f64], labels: &[usize], weights: &[f64], nu: f64) -> Result<(f64, Vec<f64>)> {
    let c = weights.len();
    check(logits.len(), c, labels, weights)?;
    let probs = softmax(logits, c);
    let value = fcce(&probs, labels, weights, nu)?;
    let b = labels.len() as f64;
    let mut grad = vec![0.0; logits.len()];
    for (i, &y) in labels.iter().enumerate() {
        let p = &probs[i * c..(i + 1) * c];
        let pt = p[y];
        let clamped = pt < PROB_EPS;
        // dL/dp_t of  -w (1-p)^ν ln p
        let lnp = pt.max(PROB_EPS).ln();
        let mut dl_dpt = if nu == 0.0 { 0.0 } else { nu * (1.0 - pt).powf(nu - 1.0) * lnp };
        if !clamped {
            dl_dpt -= (1.0 - pt).powf(nu) / pt;
        }
        let dl_dpt = weights[y] * dl_dpt / b;
        let g = &mut grad[i * c..(i + 1) * c];
        for k in 0..c {
            let dpt_dk = if k == y { pt * (1.0 - pt) } else { -pt * p[k] };
            g[k] = dl_dpt * dpt_dk;
        }
    }
    Ok((value, grad))
}

pub fn cce_logits(logits: &[f64], labels: &[usize], weights: &[f64]) -> Result<(f64, Vec<f64>)> {
    fcce_logits(logits, labels, weights, 0.0)
}

/// Value and logit gradient of the squared hinge on integer labels.
pub fn squared_hinge_logits(logits: &[f64], labels: &[usize], weights: &[f64]) -> Result<(f64, Vec<f64>)> {
    let c = weights.len();
    check(logits.len(), c, labels, weights)?;
    let t = pm1_targets(labels, c);
    let value = squared_hinge(logits, &t, weights)?;
    let b = labels.len() as f64;
    let grad = logits
        .iter()
        .zip(&t)
        .enumerate()
        .map(|(k, (y, t))| -2.0 * weights[k % c] * (1.0 - y * t).max(0.0) * t / b)
        .collect();
    Ok((value, grad))
}

/// Per-column standardization of a `B×D` batch, returning the standardized
/// values and per-column `1/σ`.
pub fn batch_standardize(z: &[f64], b: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; z.len()];
    let mut inv = vec![0.0; d];
    for j in 0..d {
        let mean = (0..b).map(|i| z[i * d + j]).sum::<f64>() / b as f64;
        let var = (0..b).map(|i| (z[i * d + j] - mean).powi(2)).sum::<f64>() / b as f64;
        let is = 1.0 / (var + STD_EPS).sqrt();
        inv[j] = is;
        for i in 0..b {
            out[i * d + j] = (z[i * d + j] - mean) * is;
        }
    }
    (out, inv)
}

/// Gradient through [`batch_standardize`]: `dx = (dy - mean(dy) - y·mean(dy·y)) / σ`.
pub fn batch_standardize_backward(y: &[f64], inv: &[f64], dy: &[f64], b: usize, d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for j in 0..d {
        let m1 = (0..b).map(|i| dy[i * d + j]).sum::<f64>() / b as f64;
        let m2 = (0..b).map(|i| dy[i * d + j] * y[i * d + j]).sum::<f64>() / b as f64;
        for i in 0..b {
            let k = i * d + j;
            dx[k] = (dy[k] - m1 - y[k] * m2) * inv[j];
        }
    }
    dx
}

/// Cross-correlation of two standardized `B×D` batches, `C = z1ᵀz2 / B`.
pub fn cross_correlation(z1: &[f64], z2: &[f64], b: usize, d: usize) -> Vec<f64> {
    let mut c = vec![0.0; d * d];
    for i in 0..b {
        let r1 = &z1[i * d..(i + 1) * d];
        let r2 = &z2[i * d..(i + 1) * d];
        for (p, a) in r1.iter().enumerate() {
            let row = &mut c[p * d..(p + 1) * d];
            for (q, bv) in r2.iter().enumerate() {
                row[q] += a * bv;
            }
        }
    }
    c.iter_mut().for_each(|v| *v /= b as f64);
    c
}

/// Barlow Twins loss of two `B×D` embeddings and its gradients w.r.t. both.
pub fn barlow_twins(z1: &[f64], z2: &[f64], b: usize, lambda: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if b < 2 || z1.len() != z2.len() || z1.len() % b != 0 {
        return dim_err("Barlow Twins needs two equal B×D batches with B ≥ 2");
    }
    let d = z1.len() / b;
    let (n1, inv1) = batch_standardize(z1, b, d);
    let (n2, inv2) = batch_standardize(z2, b, d);
    let c = cross_correlation(&n1, &n2, b, d);
    let mut value = 0.0;
    let mut g = vec![0.0; d * d];
    for p in 0..d {
        for q in 0..d {
            let v = c[p * d + q];
            if p == q {
                value += (1.0 - v).powi(2);
                g[p * d + q] = -2.0 * (1.0 - v);
            } else {
                value += lambda * v * v;
                g[p * d + q] = 2.0 * lambda * v;
            }
        }
    }
    let mut dn1 = vec![0.0; z1.len()];
    let mut dn2 = vec![0.0; z2.len()];
    for i in 0..b {
        for p in 0..d {
            let gp = &g[p * d..(p + 1) * d];
            let r2 = &n2[i * d..(i + 1) * d];
            dn1[i * d + p] = gp.iter().zip(r2).map(|(g, v)| g * v).sum::<f64>() / b as f64;
            let a = n1[i * d + p] / b as f64;
            for q in 0..d {
                dn2[i * d + q] += gp[q] * a;
            }
        }
    }
    let d1 = batch_standardize_backward(&n1, &inv1, &dn1, b, d);
    let d2 = batch_standardize_backward(&n2, &inv2, &dn2, b, d);
    Ok((value, d1, d2))
}

/// Feature regularization on a `B×D` latent batch and its gradient.
/// The default reading penalises `|Σ_b z_bd|`; `signed` uses the bare sum.
pub fn feature_reg(z: &[f64], b: usize, signed: bool) -> Result<(f64, Vec<f64>)> {
    if b == 0 || z.len() % b != 0 {
        return dim_err("feature regularization needs a B×D batch");
    }
    let d = z.len() / b;
    let norm = 1.0 / (d * b) as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; z.len()];
    for j in 0..d {
        let s: f64 = (0..b).map(|i| z[i * d + j]).sum();
        let (v, g) = if signed {
            (s, 1.0)
        } else {
            (s.abs(), if s > 0.0 { 1.0 } else if s < 0.0 { -1.0 } else { 0.0 })
        };
        value += v;
        for i in 0..b {
            grad[i * d + j] = g * norm;
        }
    }
    Ok((value * norm, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Cce,
    Fcce,
    SquaredHinge,
}

/// Loss selection and weights of every term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Inverse-frequency class weighting over the training pool.
    pub weighted: bool,
    pub nu: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Use the bare batch sum in feature regularization.
    pub fr_signed: bool,
    /// Width of both projector layers.
    pub projector_width: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Cce,
            weighted: true,
            nu: DEFAULT_NU,
            lambda: DEFAULT_LAMBDA,
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
            fr_signed: false,
            projector_width: 2048,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nu < 0.0 || self.lambda < 0.0 || self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return cfg_err("loss weights must be non-negative");
        }
        if self.beta > 0.0 && self.projector_width == 0 {
            return cfg_err("projector_width must be positive when beta > 0");
        }
        Ok(())
    }

    /// Classification term and its logit gradient.
    pub fn classify(&self, logits: &[f64], labels: &[usize], weights: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self.kind {
            LossKind::Cce => cce_logits(logits, labels, weights),
            LossKind::Fcce => fcce_logits(logits, labels, weights, self.nu),
            LossKind::SquaredHinge => squared_hinge_logits(logits, labels, weights),
        }
    }

    /// `α·L_cls + β·L_ssl + γ·L_fr` from already computed terms.
    pub fn combine(&self, cls: f64, ssl: f64, fr: f64) -> f64 {
        self.alpha * cls + self.beta * ssl + self.gamma * fr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_examples() {
        assert_eq!(class_weights(&[90, 10]).unwrap(), vec![0.2, 1.8]);
        assert_eq!(class_weights(&[7, 7, 7]).unwrap(), vec![1.0; 3]);
        let w = class_weights(&[100, 100, 50]).unwrap();
        for (a, b) in w.iter().zip([0.75, 0.75, 1.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(class_weights(&[3, 0]).is_err());
    }

    #[test]
    fn cce_examples() {
        let ln2 = 2f64.ln();
        assert!((cce(&[0.5, 0.5], &[0], &[1.0, 1.0]).unwrap() - ln2).abs() < 1e-15);
        assert_eq!(cce(&[1.0, 0.0], &[0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!((cce(&[0.5, 0.5], &[1], &[0.2, 1.8]).unwrap() - 1.8 * ln2).abs() < 1e-15);
        assert!(cce(&[0.0, 1.0], &[0], &[1.0, 1.0]).unwrap().is_finite());
    }

    #[test]
    fn fcce_examples() {
        let ln2 = 2f64.ln();
        let a = fcce(&[0.5, 0.5], &[0], &[1.0, 1.0], 2.0).unwrap();
        assert!((a - 0.25 * ln2).abs() < 1e-15);
        let b = fcce(&[0.9, 0.1], &[0], &[1.0, 1.0], 2.0).unwrap();
        let want = (0.01 / 0.25) * ((1.0 / 0.9f64).ln() / ln2);
        assert!((b / a - want).abs() < 1e-12);
        let p = [0.2, 0.3, 0.5, 0.6, 0.1, 0.3];
        assert_eq!(fcce(&p, &[2, 0], &[1.0, 2.0, 3.0], 0.0).unwrap(), cce(&p, &[2, 0], &[1.0, 2.0, 3.0]).unwrap());
    }

    #[test]
    fn hinge_examples() {
        let w = [1.0];
        assert_eq!(squared_hinge(&[1.0], &[1.0], &w).unwrap(), 0.0);
        assert_eq!(squared_hinge(&[0.0], &[1.0], &w).unwrap(), 1.0);
        assert_eq!(squared_hinge(&[-1.0], &[1.0], &w).unwrap(), 4.0);
    }

    #[test]
    fn barlow_identity_twins() {
        // columns are orthogonal ±1 patterns, so C = I
        let z = [1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0];
        let (v, _, _) = barlow_twins(&z, &z, 4, DEFAULT_LAMBDA).unwrap();
        assert!(v.abs() < 1e-20);
    }

    #[test]
    fn feature_reg_examples() {
        assert_eq!(feature_reg(&[1.0, -1.0, -1.0, 1.0], 2, false).unwrap().0, 0.0);
        assert_eq!(feature_reg(&[1.0; 6], 3, false).unwrap().0, 1.0);
        assert_eq!(feature_reg(&[-1.0; 6], 3, true).unwrap().0, -1.0);
    }
}
