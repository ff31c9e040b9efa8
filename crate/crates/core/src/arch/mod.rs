//! Network graphs: the VGG-style 3Mb-BNN, the residual Res-BNN, and small
//! variants of either for tests. A model is a list of layers, a split index
//! marking the end of the feature extractor, and a growable output head.
//!
//! The feature extractor ends with LGAP and a dense projection to the latent
//! vector. The classifier is a stack of DenseSkip blocks and the head.

pub mod kernels;
pub mod layers;

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use layers::{
    inverse, shuffle2, Cache, ConvBlock, DenseBlock, DownUnit, Layer, Lgap, OutputLayer, ResidualUnit,
};

use crate::binmath::{argmax_i32, BitTensor};
use crate::error::{cfg_err, dim_err, Result};
use crate::qat::{OutputScaleSpec, Param};
use crate::tensor::Act;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VggBlock {
    pub filters: usize,
    pub groups: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResStage {
    pub channels: usize,
    /// Residual units after the stage's down-sampling unit.
    pub units: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Backbone {
    /// Blocks of `convs_per_block` 3×3 convolutions followed by a 2×2 pool.
    Vgg {
        blocks: Vec<VggBlock>,
        convs_per_block: usize,
    },
    /// Strided 3×3 stem, then per stage one down-sampling unit and
    /// `units` residual units. `groups` applies to every 3×3 inside units.
    Res {
        stem: usize,
        stages: Vec<ResStage>,
        groups: usize,
    },
}

/// Declarative description of a model, enough to rebuild it from a seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    /// `[H, W, C]` of the encoded input.
    pub input: [usize; 3],
    pub backbone: Backbone,
    pub latent: usize,
    /// New units of each DenseSkip block.
    pub dense_skip: Vec<usize>,
    pub skip_groups: usize,
    #[serde(default = "default_k")]
    pub scale_k: f64,
    #[serde(default = "default_c")]
    pub output_c: f64,
}

fn default_k() -> f64 {
    1.0
}

fn default_c() -> f64 {
    OutputScaleSpec::DEFAULT_C
}

impl ArchSpec {
    /// The 3 Mb VGG-style model: blocks (128,1), (256,2), (512,4) of two
    /// convolutions, a 1024-bit latent and two DenseSkip blocks of 256 units.
    pub fn mb3(input: [usize; 3]) -> Self {
        ArchSpec {
            input,
            backbone: Backbone::Vgg {
                blocks: vec![
                    VggBlock { filters: 128, groups: 1 },
                    VggBlock { filters: 256, groups: 2 },
                    VggBlock { filters: 512, groups: 4 },
                ],
                convs_per_block: 2,
            },
            latent: 1024,
            dense_skip: vec![256, 256],
            skip_groups: 2,
            scale_k: 1.0,
            output_c: OutputScaleSpec::DEFAULT_C,
        }
    }

    /// The 17-block residual model for 128×128 inputs.
    pub fn res_bnn(input: [usize; 3]) -> Self {
        ArchSpec {
            input,
            backbone: Backbone::Res {
                stem: 64,
                stages: vec![
                    ResStage { channels: 128, units: 6 },
                    ResStage { channels: 256, units: 5 },
                    ResStage { channels: 512, units: 1 },
                    ResStage { channels: 512, units: 0 },
                ],
                groups: 16,
            },
            latent: 1024,
            dense_skip: vec![256, 256],
            skip_groups: 2,
            scale_k: 1.0,
            output_c: OutputScaleSpec::DEFAULT_C,
        }
    }

    /// A small VGG-style model for desk-scale runs on 8×8 inputs.
    pub fn tiny(input: [usize; 3]) -> Self {
        ArchSpec {
            input,
            backbone: Backbone::Vgg {
                blocks: vec![VggBlock { filters: 32, groups: 1 }, VggBlock { filters: 64, groups: 2 }],
                convs_per_block: 1,
            },
            latent: 128,
            dense_skip: vec![64],
            skip_groups: 2,
            scale_k: 1.0,
            output_c: OutputScaleSpec::DEFAULT_C,
        }
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn digest(&self) -> String {
        let text = toml::to_string(self).expect("spec serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// A built network.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ArchSpec,
    pub layers: Vec<Layer>,
    /// `layers[..fe_split]` is the feature extractor.
    pub fe_split: usize,
    pub head: OutputLayer,
}

/// Post-sign activations of every layer, flattened, plus the head's integer
/// output.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub activations: Vec<BitTensor>,
    pub logits: Vec<i32>,
}

impl Model {
    pub fn build(spec: &ArchSpec, n_classes: usize, rng: &mut impl Rng) -> Result<Model> {
        let k = spec.scale_k;
        if !(k > 0.0 && spec.output_c > 0.0) {
            return cfg_err("scale constants must be positive");
        }
        let mut layers = Vec::new();
        let mut dims = spec.input;
        let push = |layer: Layer, dims: &mut [usize; 3], layers: &mut Vec<Layer>| -> Result<()> {
            *dims = layer.out_dims(*dims)?;
            layers.push(layer);
            Ok(())
        };
        match &spec.backbone {
            Backbone::Vgg { blocks, convs_per_block } => {
                for (bi, b) in blocks.iter().enumerate() {
                    for ci in 0..*convs_per_block {
                        let name = format!("block{bi}.conv{ci}");
                        let conv = ConvBlock::square(&name, 3, dims[2], b.filters, b.groups, 1, k, rng)?;
                        push(Layer::Conv(conv), &mut dims, &mut layers)?;
                    }
                    push(Layer::MaxPool, &mut dims, &mut layers)?;
                }
            }
            Backbone::Res { stem, stages, groups } => {
                let conv = ConvBlock::square("stem", 3, dims[2], *stem, 1, 2, k, rng)?;
                push(Layer::Conv(conv), &mut dims, &mut layers)?;
                for (si, s) in stages.iter().enumerate() {
                    let d = DownUnit::new(&format!("stage{si}.down"), dims[2], s.channels, *groups, k, rng)?;
                    push(Layer::Down(d), &mut dims, &mut layers)?;
                    for u in 0..s.units {
                        let r = ResidualUnit::new(&format!("stage{si}.unit{u}"), s.channels, *groups, k, rng)?;
                        push(Layer::Residual(r), &mut dims, &mut layers)?;
                    }
                }
            }
        }
        push(Layer::Lgap(Lgap::new(dims, k, rng)?), &mut dims, &mut layers)?;
        let proj = DenseBlock::new("latent", dims[2], spec.latent, 1, false, false, k, rng)?;
        push(Layer::Dense(proj), &mut dims, &mut layers)?;
        let fe_split = layers.len();
        for (i, units) in spec.dense_skip.iter().enumerate() {
            let name = format!("skip{i}");
            let d = DenseBlock::new(&name, dims[2], *units, spec.skip_groups, true, true, k, rng)?;
            push(Layer::Dense(d), &mut dims, &mut layers)?;
        }
        let head = OutputLayer::new(dims[2], n_classes, spec.output_c, rng);
        Ok(Model {
            spec: spec.clone(),
            layers,
            fe_split,
            head,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.head.n_classes
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent
    }

    /// Output dims of `layers[..end]`.
    pub fn dims_at(&self, end: usize) -> [usize; 3] {
        self.layers[..end]
            .iter()
            .try_fold(self.spec.input, |d, l| l.out_dims(d))
            .expect("built model has consistent dims")
    }

    /// Training-path forward over `layers[range]`.
    pub fn forward_range(&self, x: &Act, range: Range<usize>) -> Result<(Act, Vec<Cache>)> {
        let mut caches = Vec::with_capacity(range.len());
        let mut cur = x.clone();
        for l in &self.layers[range] {
            let (y, c) = l.forward(&cur)?;
            caches.push(c);
            cur = y;
        }
        Ok((cur, caches))
    }

    /// Backward over `layers[start..start + caches.len()]`; returns the input
    /// gradient of `layers[start]` when `need_dx`.
    pub fn backward_range(&mut self, caches: &[Cache], dy: Act, start: usize, need_dx: bool) -> Option<Act> {
        let mut d = dy;
        for (k, c) in caches.iter().enumerate().rev() {
            let last = k == 0;
            match self.layers[start + k].backward(c, &d, !last || need_dx) {
                Some(dx) => d = dx,
                None => return None,
            }
        }
        Some(d)
    }

    /// Scaled logits `α·z` for a batch of classifier inputs.
    pub fn head_forward(&self, x: &Act) -> Result<Act> {
        self.head.forward(x)
    }

    pub fn head_backward(&mut self, x: &Act, dlogits: &Act, need_dx: bool) -> Option<Act> {
        self.head.backward(x, dlogits, need_dx)
    }

    /// Feature-extractor output on the inference path.
    pub fn infer_latent(&self, x: &BitTensor) -> Result<BitTensor> {
        self.infer_range(x, 0..self.fe_split)
    }

    pub fn infer_range(&self, x: &BitTensor, range: Range<usize>) -> Result<BitTensor> {
        self.layers[range].iter().try_fold(x.clone(), |cur, l| l.infer(&cur))
    }

    /// Integer class scores from a latent vector.
    pub fn infer_from_latent(&self, latent: &BitTensor) -> Result<Vec<i32>> {
        if latent.len() != self.latent_dim() {
            return dim_err(format!("latent of {} bits, expected {}", latent.len(), self.latent_dim()));
        }
        let z = self.infer_range(latent, self.fe_split..self.layers.len())?;
        self.head.infer(&z)
    }

    pub fn infer(&self, x: &BitTensor) -> Result<Vec<i32>> {
        self.infer_from_latent(&self.infer_latent(x)?)
    }

    pub fn predict(&self, x: &BitTensor) -> Result<usize> {
        Ok(argmax_i32(&self.infer(x)?))
    }

    pub fn predict_latent(&self, latent: &BitTensor) -> Result<usize> {
        Ok(argmax_i32(&self.infer_from_latent(latent)?))
    }

    /// Every post-sign activation on the inference path (no scales).
    pub fn trace_infer(&self, x: &BitTensor) -> Result<Trace> {
        let mut activations = Vec::new();
        let mut cur = x.clone();
        for l in &self.layers {
            cur = l.infer(&cur)?;
            activations.push(cur.clone().reshape(&[cur.len()])?);
        }
        Ok(Trace {
            logits: self.head.infer(&cur)?,
            activations,
        })
    }

    /// Every post-sign activation on the scaled training path. Logits are
    /// returned divided by `α`, which recovers the integer accumulation.
    pub fn trace_train(&self, x: &BitTensor) -> Result<Trace> {
        let mut cur = Act::from_bits(std::slice::from_ref(x), self.spec.input)?;
        let mut activations = Vec::new();
        for l in &self.layers {
            cur = l.forward(&cur)?.0;
            let bits = cur.sample_bits(0);
            activations.push(bits.reshape(&[cur.per()])?);
        }
        let a = self.head.alpha();
        let logits = self.head.forward(&cur)?;
        Ok(Trace {
            logits: logits.data.iter().map(|v| (v / a).round() as i32).collect(),
            activations,
        })
    }

    pub fn grow_head(&mut self, n_classes: usize, rng: &mut impl Rng) -> Result<()> {
        self.head.grow(n_classes, rng)
    }

    /// Parameters of the feature extractor.
    pub fn fe_params_mut(&mut self) -> Vec<&mut Param> {
        let split = self.fe_split;
        self.layers[..split].iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Parameters of the DenseSkip stack and head.
    pub fn classifier_params_mut(&mut self) -> Vec<&mut Param> {
        let split = self.fe_split;
        let mut v: Vec<&mut Param> = self.layers[split..].iter_mut().flat_map(|l| l.params_mut()).collect();
        v.push(&mut self.head.weight);
        v
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.layers.iter().flat_map(|l| l.params()).collect();
        v.push(&self.head.weight);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.layers.iter_mut().flat_map(|l| l.params_mut()).collect();
        v.push(&mut self.head.weight);
        v
    }

    /// Total binary weights, i.e. model size in bits.
    pub fn param_bits(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn fe_param_bits(&self) -> usize {
        self.layers[..self.fe_split].iter().flat_map(|l| l.params()).map(|p| p.len()).sum()
    }

    /// Re-draws the DenseSkip stack and head; the feature extractor is kept.
    pub fn reset_classifier(&mut self, rng: &mut impl Rng) -> Result<()> {
        let fresh = Model::build(&self.spec, self.n_classes(), rng)?;
        let split = self.fe_split;
        self.layers.truncate(split);
        self.layers.extend(fresh.layers.into_iter().skip(split));
        self.head = fresh.head;
        Ok(())
    }

    /// Re-draws every parameter.
    pub fn reset_all(&mut self, rng: &mut impl Rng) -> Result<()> {
        *self = Model::build(&self.spec, self.n_classes(), rng)?;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }
}

/// The 3Mb-BNN for `input` (H and W divisible by 8).
pub fn build_3mb_bnn(input: [usize; 3], n_classes: usize, rng: &mut impl Rng) -> Result<Model> {
    if input[0] % 8 != 0 || input[1] % 8 != 0 {
        return cfg_err(format!("3Mb-BNN needs spatial dims divisible by 8, got {input:?}"));
    }
    Model::build(&ArchSpec::mb3(input), n_classes, rng)
}

/// The Res-BNN for `input` (H and W divisible by 32).
pub fn build_res_bnn(input: [usize; 3], n_classes: usize, rng: &mut impl Rng) -> Result<Model> {
    if input[0] % 32 != 0 || input[1] % 32 != 0 {
        return cfg_err(format!("Res-BNN needs spatial dims divisible by 32, got {input:?}"));
    }
    Model::build(&ArchSpec::res_bnn(input), n_classes, rng)
}

/// Borrowed views of the two halves of a model.
pub struct Split<'a> {
    pub fe: &'a [Layer],
    pub classifier: &'a [Layer],
    pub head: &'a OutputLayer,
}

pub fn split_fe_classifier(model: &Model) -> Split<'_> {
    let (fe, classifier) = model.layers.split_at(model.fe_split);
    Split {
        fe,
        classifier,
        head: &model.head,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn conv_bits(k: usize, cin: usize, cout: usize, g: usize) -> usize {
        k * k * cin / g * cout
    }

    #[test]
    fn mb3_parameter_count_is_pinned() {
        let m = build_3mb_bnn([32, 32, 64], 100, &mut rng()).unwrap();
        let convs = conv_bits(3, 64, 128, 1)
            + conv_bits(3, 128, 128, 1)
            + conv_bits(3, 128, 256, 2)
            + conv_bits(3, 256, 256, 2)
            + conv_bits(3, 256, 512, 4)
            + conv_bits(3, 512, 512, 4);
        let lgap = 16 * 512 + 1024 * 1024;
        let skips = 2 * 1024 / 2 * 256 + 2 * 1280 / 2 * 256;
        let head = 1536 * 100;
        assert_eq!(convs, 1_548_288);
        assert_eq!(m.param_bits(), convs + lgap + skips + head);
        assert_eq!(m.param_bits(), 3_348_480);
        assert!((2_800_000..=3_400_000).contains(&m.param_bits()));
        assert_eq!(m.dims_at(m.fe_split - 2), [4, 4, 512]);
    }

    #[test]
    fn latent_compresses_image_24x() {
        let m = build_3mb_bnn([32, 32, 64], 10, &mut rng()).unwrap();
        assert_eq!(32 * 32 * 3 * 8 / m.latent_dim(), 24);
    }

    #[test]
    fn res_bnn_has_17_blocks() {
        let spec = ArchSpec::res_bnn([128, 128, 64]);
        let Backbone::Res { stages, .. } = &spec.backbone else { unreachable!() };
        let blocks = 1 + stages.iter().map(|s| 1 + s.units).sum::<usize>();
        assert_eq!(blocks, 17);
    }

    #[test]
    fn res_bnn_parameter_count_is_pinned() {
        let m = build_res_bnn([128, 128, 64], 50, &mut rng()).unwrap();
        let res = |c: usize| {
            let h = c / 2;
            h * h + 9 * h * h / 16 + h * h
        };
        let down = |ci: usize, co: usize| {
            let h = co / 2;
            ci * h + 9 * h * h / 16 + h * h + 9 * ci * ci / 16 + ci * h
        };
        let fe = 9 * 64 * 64
            + down(64, 128)
            + 6 * res(128)
            + down(128, 256)
            + 5 * res(256)
            + down(256, 512)
            + res(512)
            + down(512, 512)
            + 16 * 512
            + 1024 * 1024;
        assert_eq!(m.fe_param_bits(), fe);
        assert_eq!(m.param_bits(), 3_067_904);
        assert_eq!(m.dims_at(m.fe_split - 2), [4, 4, 512]);
    }

    #[test]
    fn shapes_are_validated() {
        assert!(build_3mb_bnn([30, 32, 64], 10, &mut rng()).is_err());
        assert!(build_res_bnn([64, 48, 64], 10, &mut rng()).is_err());
    }

    #[test]
    fn shuffle_is_invertible() {
        let p = shuffle2(8);
        assert_eq!(p, vec![0, 4, 1, 5, 2, 6, 3, 7]);
        let inv = inverse(&p);
        let round: Vec<usize> = (0..8).map(|j| p[inv[j]]).collect();
        assert_eq!(round, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn grow_keeps_rows_and_old_scores() {
        let mut m = Model::build(&ArchSpec::tiny([8, 8, 16]), 5, &mut rng()).unwrap();
        let x = BitTensor::from_fn(&[8, 8, 16], |i| i % 3 == 0);
        let before = m.infer(&x).unwrap();
        let rows = m.head.weight.bits().clone();
        let a0 = m.head.alpha();
        m.grow_head(6, &mut rng()).unwrap();
        let after = m.infer(&x).unwrap();
        assert_eq!(&after[..5], &before[..]);
        for i in 0..rows.len() {
            assert_eq!(m.head.weight.bits().bit(i), rows.bit(i));
        }
        assert!((m.head.alpha() / a0 - (5.0f64 / 6.0).sqrt()).abs() < 1e-15);
        assert!(m.grow_head(3, &mut rng()).is_err());
    }
}
