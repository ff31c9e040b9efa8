//! Mini-batch training of a model with plateau schedule, early stopping and
//! best-weight restore.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::arch::Model;
use crate::binmath::BitTensor;
use crate::encode::{Encoding, QuantizedImage, RawImage};
use crate::error::{cfg_err, Result};
use crate::loss::{barlow_twins, class_weights, feature_reg, LossConfig, Projector};
use crate::qat::{augment, Adam, EarlyStop, Param, Plateau, StrongAugment, TrainConfig};
use crate::tensor::Act;

/// What a training or evaluation sample carries.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Image(RawImage),
    Quantized(QuantizedImage),
    /// Feature-extractor output; enters the model at the classifier.
    Latent(BitTensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub payload: Payload,
    /// Output index.
    pub label: usize,
}

impl Item {
    pub fn image(img: RawImage, label: usize) -> Self {
        Item {
            payload: Payload::Image(img),
            label,
        }
    }
}

/// Encoded input without augmentation.
pub fn encode_plain(p: &Payload, enc: Encoding) -> Result<BitTensor> {
    match p {
        Payload::Image(img) => enc.encode(img),
        Payload::Quantized(q) => Ok(q.encode()),
        Payload::Latent(z) => Ok(z.clone()),
    }
}

/// Encoded input with a fresh augmentation draw. Stored levels are mapped
/// back to pixels first; latents are used as-is.
pub fn encode_augmented(p: &Payload, enc: Encoding, cfg: &crate::qat::AugmentConfig, rng: &mut impl Rng) -> Result<BitTensor> {
    match p {
        Payload::Image(img) => enc.encode(&augment::augment(img, cfg, rng)),
        Payload::Quantized(q) if *cfg == crate::qat::AugmentConfig::none() => Ok(q.encode()),
        Payload::Quantized(q) => enc.encode(&augment::augment(&q.dequantize(), cfg, rng)),
        Payload::Latent(z) => Ok(z.clone()),
    }
}

/// Predicted output index for one item.
pub fn predict(model: &Model, item: &Payload, enc: Encoding) -> Result<usize> {
    match item {
        Payload::Latent(z) => model.predict_latent(z),
        p => model.predict(&encode_plain(p, enc)?),
    }
}

/// Predictions for many items, split over up to `threads` workers.
pub fn predict_all(model: &Model, items: &[Item], enc: Encoding, threads: usize) -> Result<Vec<usize>> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(|it| predict(model, &it.payload, enc)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<usize>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(|it| predict(model, &it.payload, enc)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Evaluation parallelism from `FBNN_THREADS`, default 1.
pub fn eval_threads() -> usize {
    std::env::var("FBNN_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|n: &usize| *n > 0)
        .unwrap_or(1)
}

pub fn accuracy_of(model: &Model, items: &[Item], enc: Encoding) -> Result<f64> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let preds = predict_all(model, items, enc, eval_threads())?;
    let ok = preds.iter().zip(items).filter(|(p, it)| **p == it.label).count();
    Ok(ok as f64 / items.len() as f64)
}

/// Inverse-frequency weights over the labels of `items`; outputs without
/// samples get weight 0.
pub fn label_weights(items: &[Item], n_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; n_classes];
    for it in items {
        counts[it.label] += 1;
    }
    let present: Vec<usize> = counts.iter().copied().filter(|c| *c > 0).collect();
    let mut w = class_weights(&present)?.into_iter();
    Ok(counts
        .iter()
        .map(|c| if *c > 0 { w.next().expect("one per present class") } else { 0.0 })
        .collect())
}

/// Everything `fit` needs besides the data.
#[derive(Clone, Debug)]
pub struct FitSpec {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub encoding: Encoding,
    /// Train only the classifier; images pass through the frozen extractor.
    pub freeze_fe: bool,
    /// Per-output weights; empty means all ones.
    pub class_weights: Vec<f64>,
    /// Enables the self-supervised and feature-regularization terms.
    pub pretrain: bool,
    pub strong: StrongAugment,
}

impl FitSpec {
    pub fn new(train: TrainConfig, loss: LossConfig, encoding: Encoding) -> Self {
        FitSpec {
            train,
            loss,
            encoding,
            freeze_fe: false,
            class_weights: Vec::new(),
            pretrain: false,
            strong: StrongAugment::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Running accuracy over the epoch's augmented batches.
    pub train_acc: f64,
    pub val_acc: f64,
    /// Accuracy on the monitor set, if one was given.
    pub monitor_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub epochs: usize,
    pub best_epoch: usize,
    pub curve: Vec<EpochStats>,
}

fn snapshot(model: &Model) -> Vec<Vec<f64>> {
    model.params().iter().map(|p| p.proxy.clone()).collect()
}

fn restore(model: &mut Model, snap: &[Vec<f64>]) {
    for (p, s) in model.params_mut().into_iter().zip(snap) {
        p.proxy.copy_from_slice(s);
        p.refresh();
    }
}

/// Trains `model` on `train`, selecting weights by accuracy on `val` (or on
/// the running training accuracy when `val` is empty).
pub fn fit(
    model: &mut Model,
    train: &[Item],
    val: &[Item],
    spec: &FitSpec,
    projector: Option<&mut Projector>,
    rng: &mut impl Rng,
) -> Result<FitReport> {
    fit_monitored(model, train, val, &[], spec, projector, rng)
}

/// As [`fit`], also recording accuracy on `monitor` after every epoch. The
/// monitor set never influences training.
pub fn fit_monitored(
    model: &mut Model,
    train: &[Item],
    val: &[Item],
    monitor: &[Item],
    spec: &FitSpec,
    mut projector: Option<&mut Projector>,
    rng: &mut impl Rng,
) -> Result<FitReport> {
    spec.train.validate()?;
    spec.loss.validate()?;
    if train.is_empty() {
        return cfg_err("empty training set");
    }
    let nc = model.n_classes();
    if let Some(it) = train.iter().find(|it| it.label >= nc) {
        return cfg_err(format!("label {} outside the {nc}-class head", it.label));
    }
    let weights = if spec.class_weights.is_empty() {
        vec![1.0; nc]
    } else if spec.class_weights.len() == nc {
        spec.class_weights.clone()
    } else {
        return cfg_err("class weight count differs from head size");
    };
    if !spec.freeze_fe && train.iter().any(|it| matches!(it.payload, Payload::Latent(_))) {
        return cfg_err("latent samples need a frozen feature extractor");
    }
    let ssl = spec.pretrain && spec.loss.beta > 0.0;
    if ssl && projector.is_none() {
        return cfg_err("self-supervised term needs a projector");
    }

    for p in model.params_mut() {
        p.reset_moments();
    }
    if let Some(pr) = projector.as_deref_mut() {
        pr.params_mut().into_iter().for_each(|p| p.reset_moments());
    }
    let mut adam = Adam::default();
    let mut plateau = Plateau::new(spec.train.initial_lr, spec.train.plateau_factor, spec.train.plateau_patience);
    let mut stop = EarlyStop::new(spec.train.stop_patience);
    let mut best = snapshot(model);
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..spec.train.max_epochs {
        let lr = plateau.lr();
        order.shuffle(rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(spec.train.batch_size) {
            let items: Vec<&Item> = batch.iter().map(|i| &train[*i]).collect();
            let (l, c) = step(model, &items, spec, &weights, projector.as_deref_mut(), ssl, &mut adam, lr, rng)?;
            loss_sum += l * items.len() as f64;
            correct += c;
        }
        let train_acc = correct as f64 / train.len() as f64;
        let val_acc = if val.is_empty() {
            train_acc
        } else {
            accuracy_of(model, val, spec.encoding)?
        };
        curve.push(EpochStats {
            epoch,
            lr,
            loss: loss_sum / train.len() as f64,
            train_acc,
            val_acc,
            monitor_acc: if monitor.is_empty() {
                None
            } else {
                Some(accuracy_of(model, monitor, spec.encoding)?)
            },
        });
        if stop.improved(val_acc) {
            best = snapshot(model);
        }
        let halt = stop.observe(epoch, val_acc);
        plateau.observe(val_acc);
        if halt {
            break;
        }
    }
    restore(model, &best);
    model.zero_grad();
    Ok(FitReport {
        epochs: curve.len(),
        best_epoch: stop.best_epoch(),
        curve,
    })
}

/// One optimisation step; returns the batch loss and the number of correct
/// predictions.
#[allow(clippy::too_many_arguments)]
fn step(
    model: &mut Model,
    items: &[&Item],
    spec: &FitSpec,
    weights: &[f64],
    mut projector: Option<&mut Projector>,
    ssl: bool,
    adam: &mut Adam,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<(f64, usize)> {
    let b = items.len();
    let split = model.fe_split;
    let n_layers = model.layers.len();
    let labels: Vec<usize> = items.iter().map(|it| it.label).collect();
    let mut inputs = Vec::with_capacity(b);
    for it in items {
        inputs.push(encode_augmented(&it.payload, spec.encoding, &spec.train.augment, rng)?);
    }

    model.zero_grad();
    if let Some(pr) = projector.as_deref_mut() {
        pr.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    // feature extractor
    let latent_dims = [1, 1, model.latent_dim()];
    let (latent, fe_caches) = if spec.freeze_fe {
        let mut lat = Vec::with_capacity(b);
        for (x, it) in inputs.iter().zip(items) {
            lat.push(match it.payload {
                Payload::Latent(_) => x.clone(),
                _ => model.infer_latent(x)?,
            });
        }
        (Act::from_bits(&lat, latent_dims)?, Vec::new())
    } else {
        let x = Act::from_bits(&inputs, model.spec.input)?;
        model.forward_range(&x, 0..split)?
    };

    // classifier
    let (feat, clf_caches) = model.forward_range(&latent, split..n_layers)?;
    let logits = model.head_forward(&feat)?;
    let nc = model.n_classes();
    let correct = logits
        .data
        .chunks_exact(nc)
        .zip(&labels)
        .filter(|(row, y)| argmax_f64(row) == **y)
        .count();
    let (cls, dlogits) = spec.loss.classify(&logits.data, &labels, weights)?;
    let alpha = if spec.pretrain { spec.loss.alpha } else { 1.0 };
    let dlogits = Act {
        n: b,
        dims: [1, 1, nc],
        data: dlogits.iter().map(|g| g * alpha).collect(),
    };
    let dfeat = model.head_backward(&feat, &dlogits, true).expect("requested");
    let dlatent = model.backward_range(&clf_caches, dfeat, split, !spec.freeze_fe);
    let mut loss = alpha * cls;

    if let Some(mut dl) = dlatent {
        if spec.pretrain && spec.loss.gamma > 0.0 {
            let (fr, g) = feature_reg(&latent.data, b, spec.loss.fr_signed)?;
            loss += spec.loss.gamma * fr;
            dl.data.iter_mut().zip(&g).for_each(|(d, g)| *d += spec.loss.gamma * g);
        }
        if ssl && b >= 2 {
            let pr = projector.as_deref_mut().expect("checked by fit");
            let mut strong = Vec::with_capacity(b);
            for it in items {
                strong.push(match &it.payload {
                    Payload::Image(img) => spec.encoding.encode(&spec.strong.apply(img, rng))?,
                    Payload::Quantized(q) => spec.encoding.encode(&spec.strong.apply(&q.dequantize(), rng))?,
                    Payload::Latent(_) => unreachable!("rejected by fit"),
                });
            }
            let x2 = Act::from_bits(&strong, model.spec.input)?;
            let (latent2, fe2) = model.forward_range(&x2, 0..split)?;
            let (p1, c1) = pr.forward(&latent.data, b)?;
            let (p2, c2) = pr.forward(&latent2.data, b)?;
            let (bt, g1, g2) = barlow_twins(&p1, &p2, b, spec.loss.lambda)?;
            loss += spec.loss.beta * bt;
            let s = |g: Vec<f64>| g.into_iter().map(|v| v * spec.loss.beta).collect::<Vec<_>>();
            let dz1 = pr.backward(&c1, &s(g1));
            let dz2 = pr.backward(&c2, &s(g2));
            dl.data.iter_mut().zip(&dz1).for_each(|(d, g)| *d += g);
            let dl2 = Act {
                n: b,
                dims: latent_dims,
                data: dz2,
            };
            model.backward_range(&fe2, dl2, 0, false);
        }
        model.backward_range(&fe_caches, dl, 0, false);
    }

    let mut params: Vec<&mut Param> = if spec.freeze_fe {
        model.classifier_params_mut()
    } else {
        model.params_mut()
    };
    if let Some(pr) = projector {
        params.extend(pr.params_mut());
    }
    adam.step(&mut params, lr);
    Ok((loss, correct))
}

pub(crate) fn argmax_f64(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
