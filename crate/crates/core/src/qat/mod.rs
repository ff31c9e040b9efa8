//! Quantization-aware training primitives.
//!
//! Trainable state lives in real proxies that the forward pass binarizes with
//! `sign`. The backward pass treats `sign` as the identity clipped to
//! `[-1, 1]`. Layer outputs are multiplied by a positive, topology-derived
//! scale before binarization, so dropping the scale at inference leaves every
//! binary activation unchanged.

pub mod augment;
pub mod schedule;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binmath::BitTensor;
use crate::error::{cfg_err, dim_err, Result};

pub use augment::{AugmentConfig, AugmentParams, StrongAugment};
pub use schedule::{EarlyStop, Plateau};

/// `+1` where `x >= 0`, else `-1`.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

pub fn sign_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| sign(*v)).collect()
}

/// Clipped-identity gradient of `sign`: passes where `|x| <= 1`.
#[inline]
pub fn ste_pass(x: f64) -> bool {
    x.abs() <= 1.0
}

pub fn ste_backward(upstream: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if upstream.len() != x.len() {
        return dim_err(format!(
            "gradient of length {} for input of length {}",
            upstream.len(),
            x.len()
        ));
    }
    Ok(upstream
        .iter()
        .zip(x)
        .map(|(g, v)| if ste_pass(*v) { *g } else { 0.0 })
        .collect())
}

/// Scaling factor `K/√fanIn` that gives unit-variance pre-activations for
/// random ±1 operands.
pub fn scale_factor(fan_in: usize, k: f64) -> Result<f64> {
    if fan_in == 0 {
        return cfg_err("fan-in must be positive");
    }
    if !(k > 0.0) {
        return cfg_err("scale constant must be positive");
    }
    Ok(k / (fan_in as f64).sqrt())
}

/// Output scale `1/√(c·fanIn·nClasses)`.
pub fn output_alpha(fan_in: usize, n_classes: usize, c: f64) -> Result<f64> {
    if fan_in == 0 || n_classes == 0 || !(c > 0.0) {
        return cfg_err("output scale needs positive fan-in, classes and constant");
    }
    Ok(1.0 / (c * fan_in as f64 * n_classes as f64).sqrt())
}

/// Per-layer scale, fixed by topology.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub fan_in: usize,
    pub k: f64,
}

impl ScaleSpec {
    pub fn new(fan_in: usize, k: f64) -> Result<Self> {
        scale_factor(fan_in, k)?;
        Ok(ScaleSpec { fan_in, k })
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.k / (self.fan_in as f64).sqrt()
    }
}

/// Output-layer scale; recomputed whenever the class count changes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputScaleSpec {
    pub fan_in: usize,
    pub n_classes: usize,
    pub c: f64,
}

impl OutputScaleSpec {
    pub const DEFAULT_C: f64 = 5.0;

    pub fn value(&self) -> f64 {
        1.0 / (self.c * self.fan_in as f64 * self.n_classes.max(1) as f64).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Binarized on the forward pass; proxy clipped to `[-1, 1]`.
    Binary,
    /// Plain real parameter (projector head only).
    Real,
}

/// A trainable tensor: real proxy, binary view, gradient and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub proxy: Vec<f64>,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    signs: Vec<f64>,
    bits: BitTensor,
}

impl Param {
    fn build(name: &str, shape: &[usize], kind: ParamKind, proxy: Vec<f64>) -> Self {
        let n = proxy.len();
        let mut p = Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            kind,
            proxy,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            signs: Vec::new(),
            bits: BitTensor::minus_ones(&[0]),
        };
        p.refresh();
        p
    }

    /// Binary parameter with Glorot-uniform proxies.
    pub fn binary(name: &str, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt().min(1.0);
        let proxy = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
        Self::build(name, shape, ParamKind::Binary, proxy)
    }

    pub fn binary_from(name: &str, shape: &[usize], proxy: Vec<f64>) -> Result<Self> {
        if proxy.len() != shape.iter().product::<usize>() {
            return dim_err(format!("{} proxies for shape {shape:?}", proxy.len()));
        }
        let proxy = proxy.into_iter().map(|x| x.clamp(-1.0, 1.0)).collect();
        Ok(Self::build(name, shape, ParamKind::Binary, proxy))
    }

    pub fn real(name: &str, shape: &[usize], values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.iter().product::<usize>() {
            return dim_err(format!("{} values for shape {shape:?}", values.len()));
        }
        Ok(Self::build(name, shape, ParamKind::Real, values))
    }

    pub fn len(&self) -> usize {
        self.proxy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proxy.is_empty()
    }

    /// Values used on the forward pass: `sign(proxy)` for binary parameters.
    #[inline]
    pub fn forward_values(&self) -> &[f64] {
        match self.kind {
            ParamKind::Binary => &self.signs,
            ParamKind::Real => &self.proxy,
        }
    }

    /// Packed binary view.
    pub fn bits(&self) -> &BitTensor {
        &self.bits
    }

    /// Recomputes the binary view from the proxy.
    pub fn refresh(&mut self) {
        if self.kind == ParamKind::Binary {
            self.signs = sign_forward(&self.proxy);
            self.bits = BitTensor::from_fn(&self.shape, |i| self.proxy[i] >= 0.0);
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn reset_moments(&mut self) {
        self.m.iter_mut().for_each(|g| *g = 0.0);
        self.v.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Replaces proxies and moments wholesale (checkpoint restore, best-weight
    /// rollback).
    pub fn restore(&mut self, proxy: &[f64], m: &[f64], v: &[f64]) -> Result<()> {
        if proxy.len() != self.len() || m.len() != self.len() || v.len() != self.len() {
            return dim_err(format!("restore of {} into {}", proxy.len(), self.name));
        }
        self.proxy.copy_from_slice(proxy);
        self.m.copy_from_slice(m);
        self.v.copy_from_slice(v);
        self.refresh();
        Ok(())
    }

    /// Gradient w.r.t. the proxy from a gradient w.r.t. the binary view.
    fn ste_grad(&self, i: usize) -> f64 {
        match self.kind {
            ParamKind::Binary if !ste_pass(self.proxy[i]) => 0.0,
            _ => self.grad[i],
        }
    }
}

/// Adam with bias correction. The step counter is shared by all parameters it
/// updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }
}

impl Adam {
    /// One update of every parameter from its accumulated gradient. Binary
    /// proxies are clipped to `[-1, 1]` and their binary view refreshed.
    pub fn step(&mut self, params: &mut [&mut Param], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for p in params.iter_mut() {
            for i in 0..p.len() {
                let g = p.ste_grad(i);
                p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * g;
                p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * g * g;
                let mh = p.m[i] / c1;
                let vh = p.v[i] / c2;
                p.proxy[i] -= lr * mh / (vh.sqrt() + self.eps);
                if p.kind == ParamKind::Binary {
                    p.proxy[i] = p.proxy[i].clamp(-1.0, 1.0);
                }
            }
            p.refresh();
        }
    }
}

/// Optimisation settings for one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub stop_patience: usize,
    pub max_epochs: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            initial_lr: 1e-4,
            plateau_factor: 0.5,
            plateau_patience: 5,
            stop_patience: 12,
            max_epochs: 200,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return cfg_err("batch_size must be at least 1");
        }
        if !(self.initial_lr > 0.0) {
            return cfg_err("initial_lr must be positive");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return cfg_err("plateau_factor must lie in (0, 1]");
        }
        if self.max_epochs == 0 {
            return cfg_err("max_epochs must be at least 1");
        }
        Ok(())
    }
}
