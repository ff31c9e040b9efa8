//! Datasets and task streams: the CIFAR binary format, class splits with a
//! stratified validation holdout, and a seeded synthetic generator.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::encode::{ColorSpace, RawImage};
use crate::error::{cfg_err, Error, Result};
use crate::seed;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE * 3;
/// Label bytes per record: CIFAR-10 has one, CIFAR-100 a coarse and a fine.
pub const CIFAR10_LABEL_BYTES: usize = 1;
pub const CIFAR100_LABEL_BYTES: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<RawImage>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub provenance: String,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Indices of every sample of class `c`, in file order.
    pub fn indices_of(&self, c: usize) -> Vec<usize> {
        (0..self.len()).filter(|i| self.labels[*i] == c).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for l in &self.labels {
            counts[*l] += 1;
        }
        counts
    }
}

/// Parses CIFAR binary records: label byte(s), then 3072 planar R, G, B
/// bytes. The last label byte is the (fine) label.
pub fn parse_cifar(bytes: &[u8], label_bytes: usize, num_classes: usize) -> Result<LabeledDataset> {
    let rec = label_bytes + CIFAR_PIXELS;
    if bytes.is_empty() {
        return Err(Error::Parse {
            offset: 0,
            msg: "empty CIFAR file".into(),
        });
    }
    if bytes.len() % rec != 0 {
        let offset = (bytes.len() / rec * rec) as u64;
        return Err(Error::Parse {
            offset,
            msg: format!("truncated record: {} trailing bytes, records are {rec}", bytes.len() % rec),
        });
    }
    let mut images = Vec::with_capacity(bytes.len() / rec);
    let mut labels = Vec::with_capacity(bytes.len() / rec);
    for (k, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[label_bytes - 1] as usize;
        if label >= num_classes {
            return Err(Error::Parse {
                offset: (k * rec + label_bytes - 1) as u64,
                msg: format!("label {label} outside {num_classes} classes"),
            });
        }
        let px = &r[label_bytes..];
        let plane = CIFAR_SIDE * CIFAR_SIDE;
        let data = (0..plane).flat_map(|p| [px[p], px[plane + p], px[2 * plane + p]]).collect();
        images.push(RawImage {
            height: CIFAR_SIDE,
            width: CIFAR_SIDE,
            space: ColorSpace::Rgb,
            data,
        });
        labels.push(label);
    }
    Ok(LabeledDataset {
        images,
        labels,
        num_classes,
        provenance: format!("cifar-binary/{num_classes}"),
    })
}

/// Reads a CIFAR-10 (`label_bytes = 1`) or CIFAR-100 (`2`) binary file.
pub fn load_cifar_binary(path: &Path, label_bytes: usize) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path)?;
    let classes = if label_bytes == CIFAR100_LABEL_BYTES { 100 } else { 10 };
    let mut ds = parse_cifar(&bytes, label_bytes, classes)?;
    ds.provenance = path.display().to_string();
    Ok(ds)
}

/// `train.bin` and `test.bin` of an extracted CIFAR-100 binary archive.
pub fn load_cifar100_dir(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let base = if dir.join("cifar-100-binary").is_dir() {
        dir.join("cifar-100-binary")
    } else {
        dir.to_path_buf()
    };
    Ok((
        load_cifar_binary(&base.join("train.bin"), CIFAR100_LABEL_BYTES)?,
        load_cifar_binary(&base.join("test.bin"), CIFAR100_LABEL_BYTES)?,
    ))
}

/// Classes of one phase with its index lists. `train` and `val` index the
/// training dataset, `test` the test dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subset {
    pub classes: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSplit {
    pub pretrain: Option<Subset>,
    pub tasks: Vec<Subset>,
    pub seed: u64,
}

impl TaskSplit {
    /// Pre-training phase (if any) followed by the tasks.
    pub fn phases(&self) -> impl Iterator<Item = &Subset> {
        self.pretrain.iter().chain(&self.tasks)
    }

    pub fn all_classes(&self) -> Vec<usize> {
        self.phases().flat_map(|s| s.classes.iter().copied()).collect()
    }
}

/// Splits the given class groups, holding out `val_frac` of every class's
/// training samples (rounded) for validation.
pub fn make_split(
    train: &LabeledDataset,
    test: &LabeledDataset,
    pretrain: Option<Vec<usize>>,
    tasks: Vec<Vec<usize>>,
    val_frac: f64,
    seed: u64,
) -> Result<TaskSplit> {
    let mut seen = std::collections::BTreeSet::new();
    for c in pretrain.iter().chain(&tasks).flatten() {
        if *c >= train.num_classes {
            return cfg_err(format!("class {c} outside the dataset"));
        }
        if !seen.insert(*c) {
            return cfg_err(format!("class {c} appears in two phases"));
        }
    }
    if !(0.0..1.0).contains(&val_frac) {
        return cfg_err("val_frac must lie in [0, 1)");
    }
    let mut rng = seed::stream(seed, &[0x5711]);
    let mut subset = |classes: Vec<usize>| {
        let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
        for &c in &classes {
            let mut idx = train.indices_of(c);
            idx.shuffle(&mut rng);
            let nv = (idx.len() as f64 * val_frac).round() as usize;
            va.extend_from_slice(&idx[..nv]);
            tr.extend_from_slice(&idx[nv..]);
            te.extend(test.indices_of(c));
        }
        tr.sort_unstable();
        va.sort_unstable();
        Subset {
            classes,
            train: tr,
            val: va,
            test: te,
        }
    };
    let pretrain = pretrain.map(&mut subset);
    let tasks = tasks.into_iter().map(&mut subset).collect();
    Ok(TaskSplit { pretrain, tasks, seed })
}

/// Classes 0..50 for pre-training, then five tasks of ten consecutive
/// classes, with a 10% stratified validation holdout. With `shuffle` the 50
/// incremental classes are permuted by the seed before grouping.
pub fn make_cifar50_5x10(train: &LabeledDataset, test: &LabeledDataset, seed: u64, shuffle: bool) -> Result<TaskSplit> {
    if train.num_classes != 100 {
        return cfg_err(format!("CIFAR50+5X10 needs 100 classes, got {}", train.num_classes));
    }
    let mut inc: Vec<usize> = (50..100).collect();
    if shuffle {
        inc.shuffle(&mut seed::stream(seed, &[0xc1a5]));
    }
    let tasks = inc.chunks(10).map(|c| c.to_vec()).collect();
    make_split(train, test, Some((0..50).collect()), tasks, 0.1, seed)
}

/// Seeded class-conditional images: each class has a coarse 4×4 colour grid
/// upsampled to the image size; each sample adds Gaussian pixel noise.
pub fn make_synthetic(num_classes: usize, per_class: usize, size: usize, seed: u64) -> Result<LabeledDataset> {
    make_synthetic_with(num_classes, per_class, size, seed, 0)
}

/// As [`make_synthetic`], with `draw` selecting an independent noise stream
/// over the same class templates (e.g. 0 for train, 1 for test).
pub fn make_synthetic_with(num_classes: usize, per_class: usize, size: usize, seed: u64, draw: u64) -> Result<LabeledDataset> {
    if num_classes == 0 || per_class == 0 || size == 0 {
        return cfg_err("synthetic sizes must be at least 1");
    }
    let templates = synthetic_templates(num_classes, size, seed);
    let mut rng = seed::stream(seed, &[0x5e7, draw]);
    let noise = Normal::new(0.0, SYNTHETIC_NOISE).expect("valid sigma");
    let mut images = Vec::with_capacity(num_classes * per_class);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for _ in 0..per_class {
        for (c, t) in templates.iter().enumerate() {
            let data = t
                .iter()
                .map(|v| (*v as f64 + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8)
                .collect();
            images.push(RawImage {
                height: size,
                width: size,
                space: ColorSpace::Rgb,
                data,
            });
            labels.push(c);
        }
    }
    Ok(LabeledDataset {
        images,
        labels,
        num_classes,
        provenance: format!("synthetic/{num_classes}x{per_class}/{size}px/seed{seed}"),
    })
}

/// Standard deviation of the per-pixel noise of synthetic samples.
pub const SYNTHETIC_NOISE: f64 = 40.0;
const GRID: usize = 4;

/// One HWC template per class.
pub fn synthetic_templates(num_classes: usize, size: usize, seed: u64) -> Vec<Vec<u8>> {
    let mut rng = seed::stream(seed, &[0x7e3]);
    (0..num_classes)
        .map(|_| {
            let grid: Vec<[u8; 3]> = (0..GRID * GRID).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            (0..size * size)
                .flat_map(|p| {
                    let (y, x) = (p / size, p % size);
                    grid[(y * GRID / size) * GRID + x * GRID / size]
                })
                .collect()
        })
        .collect()
}

/// A synthetic train/test pair with an optional pre-training phase and
/// equally sized tasks of consecutive classes.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticStream {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub split: TaskSplit,
}

pub fn synthetic_stream(
    pretrain_classes: usize,
    tasks: usize,
    classes_per_task: usize,
    train_per_class: usize,
    test_per_class: usize,
    size: usize,
    seed: u64,
) -> Result<SyntheticStream> {
    let n = pretrain_classes + tasks * classes_per_task;
    let train = make_synthetic_with(n, train_per_class, size, seed, 0)?;
    let test = make_synthetic_with(n, test_per_class, size, seed, 1)?;
    let pre = (pretrain_classes > 0).then(|| (0..pretrain_classes).collect());
    let groups = (0..tasks)
        .map(|t| (0..classes_per_task).map(|k| pretrain_classes + t * classes_per_task + k).collect())
        .collect();
    let split = make_split(&train, &test, pre, groups, 0.1, seed)?;
    Ok(SyntheticStream { train, test, split })
}
