//! Run configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::data::{self, LabeledDataset, TaskSplit};
use crate::encode::Encoding;
use crate::error::{cfg_err, Error, Result};
use crate::loss::LossConfig;
use crate::qat::{StrongAugment, TrainConfig};
use crate::replay::{BufferSize, ScenarioSpec, Strategy, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Small VGG-style model for desk runs.
    Tiny,
    #[serde(rename = "3mb-bnn")]
    Mb3,
    ResBnn,
    /// Uses `ArchConfig::custom`.
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub model: ModelKind,
    pub encoding: Encoding,
    /// Overrides the latent width of the named model.
    pub latent: Option<usize>,
    /// Full description, required for `custom`; its input is recomputed.
    pub custom: Option<ArchSpec>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            model: ModelKind::Tiny,
            encoding: Encoding::default(),
            latent: None,
            custom: None,
        }
    }
}

impl ArchConfig {
    /// Architecture for `h`×`w` images.
    pub fn resolve(&self, h: usize, w: usize) -> Result<ArchSpec> {
        let input = [h, w, self.encoding.channels()];
        let mut spec = match self.model {
            ModelKind::Tiny => ArchSpec::tiny(input),
            ModelKind::Mb3 => ArchSpec::mb3(input),
            ModelKind::ResBnn => ArchSpec::res_bnn(input),
            ModelKind::Custom => match &self.custom {
                Some(c) => ArchSpec { input, ..c.clone() },
                None => return cfg_err("model = \"custom\" needs an [arch.custom] table"),
            },
        };
        if let Some(l) = self.latent {
            spec.latent = l;
        }
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub strategy: Strategy,
    pub variant: Variant,
    /// Buffer size in samples; at most one of the three sizes may be set.
    pub buffer_samples: Option<usize>,
    pub buffer_bits: Option<u64>,
    /// Megabits of 10⁶ bits.
    pub buffer_mb: Option<f64>,
    pub native_bits_per_pixel: Option<usize>,
    pub seeds: Vec<u64>,
    /// Budgets for the Native/Latent iso-memory sweep, in megabits.
    pub iso_grid_mb: Vec<f64>,
    /// Write a checkpoint after every task.
    pub checkpoint_tasks: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            strategy: Strategy::ErNative,
            variant: Variant::Fpt,
            buffer_samples: None,
            buffer_bits: None,
            buffer_mb: None,
            native_bits_per_pixel: None,
            seeds: vec![0],
            iso_grid_mb: Vec::new(),
            checkpoint_tasks: false,
        }
    }
}

/// Buffer budget when none is configured.
pub const DEFAULT_BUFFER_MB: f64 = 1.0;

impl ScenarioConfig {
    pub fn buffer(&self) -> Result<BufferSize> {
        match (self.buffer_samples, self.buffer_bits, self.buffer_mb) {
            (Some(n), None, None) => Ok(BufferSize::Samples(n)),
            (None, Some(b), None) => Ok(BufferSize::Bits(b)),
            (None, None, Some(mb)) if mb >= 0.0 && mb.is_finite() => Ok(BufferSize::megabits(mb)),
            (None, None, Some(mb)) => cfg_err(format!("buffer_mb {mb} must be a non-negative number")),
            (None, None, None) => Ok(BufferSize::megabits(DEFAULT_BUFFER_MB)),
            _ => cfg_err("set exactly one of buffer_samples, buffer_bits, buffer_mb"),
        }
    }
}

/// Where the images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        pretrain_classes: usize,
        tasks: usize,
        classes_per_task: usize,
        train_per_class: usize,
        test_per_class: usize,
        size: usize,
        /// Dataset seed; the run seed when absent.
        #[serde(default)]
        seed: Option<u64>,
    },
    /// CIFAR-100 binary files, split into 50 pre-training classes and five
    /// tasks of ten.
    Cifar100 {
        #[serde(default)]
        dir: Option<PathBuf>,
        #[serde(default)]
        shuffle_tasks: bool,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            pretrain_classes: 0,
            tasks: 4,
            classes_per_task: 2,
            train_per_class: 60,
            test_per_class: 30,
            size: 8,
            seed: None,
        }
    }
}

/// Train and test datasets with their task split.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub split: TaskSplit,
}

impl DataConfig {
    /// Loads the data; `dir` overrides a configured CIFAR directory.
    pub fn load(&self, dir: Option<&Path>, seed: u64) -> Result<LoadedData> {
        match self {
            DataConfig::Synthetic {
                pretrain_classes,
                tasks,
                classes_per_task,
                train_per_class,
                test_per_class,
                size,
                seed: ds,
            } => {
                let s = data::synthetic_stream(
                    *pretrain_classes,
                    *tasks,
                    *classes_per_task,
                    *train_per_class,
                    *test_per_class,
                    *size,
                    ds.unwrap_or(seed),
                )?;
                Ok(LoadedData {
                    train: s.train,
                    test: s.test,
                    split: s.split,
                })
            }
            DataConfig::Cifar100 { dir: d, shuffle_tasks } => {
                let Some(path) = dir.or(d.as_deref()) else {
                    return cfg_err("CIFAR-100 needs a data directory (--data or data.dir)");
                };
                let (train, test) = data::load_cifar100_dir(path)?;
                let split = data::make_cifar50_5x10(&train, &test, seed, *shuffle_tasks)?;
                Ok(LoadedData { train, test, split })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("runs") }
    }
}

/// A complete run description.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub training: TrainConfig,
    pub pretraining: TrainConfig,
    pub loss: LossConfig,
    pub pretrain_loss: LossConfig,
    pub strong_augment: StrongAugment,
    pub scenario: ScenarioConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks everything that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        self.arch.encoding.validate()?;
        self.training.validate()?;
        self.pretraining.validate()?;
        self.loss.validate()?;
        self.pretrain_loss.validate()?;
        self.scenario.buffer()?;
        if self.scenario.seeds.is_empty() {
            return cfg_err("scenario.seeds is empty");
        }
        if self.scenario.iso_grid_mb.iter().any(|m| !(*m > 0.0)) {
            return cfg_err("iso_grid_mb entries must be positive");
        }
        if self.arch.model == ModelKind::Custom && self.arch.custom.is_none() {
            return cfg_err("model = \"custom\" needs an [arch.custom] table");
        }
        if let DataConfig::Synthetic {
            tasks,
            classes_per_task,
            train_per_class,
            test_per_class,
            size,
            ..
        } = self.data
        {
            if tasks == 0 || classes_per_task == 0 || train_per_class == 0 || test_per_class == 0 || size == 0 {
                return cfg_err("synthetic data sizes must be at least 1");
            }
        }
        Ok(())
    }

    /// Scenario for one seed on `h`×`w` images.
    pub fn scenario_spec(&self, seed: u64, h: usize, w: usize) -> Result<ScenarioSpec> {
        Ok(ScenarioSpec {
            strategy: self.scenario.strategy,
            variant: self.scenario.variant,
            buffer: self.scenario.buffer()?,
            arch: self.arch.resolve(h, w)?,
            encoding: self.arch.encoding,
            train: self.training.clone(),
            loss: self.loss.clone(),
            pretrain_train: self.pretraining.clone(),
            pretrain_loss: self.pretrain_loss.clone(),
            strong: self.strong_augment.clone(),
            native_bits_per_pixel: self.scenario.native_bits_per_pixel,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[training]\nbatch = 3\n").is_err());
        assert!(RunConfig::from_toml("[nope]\n").is_err());
        assert!(RunConfig::from_toml("[data]\nsource = \"synthetic\"\nbogus = 1\n").is_err());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_toml(
            "[arch]\nmodel = \"3mb-bnn\"\nencoding = { kind = \"trgb\" }\n\
             [scenario]\nstrategy = \"er-latent\"\nvariant = \"RPT\"\nbuffer_mb = 2.5\n",
        )
        .unwrap();
        assert_eq!(c.arch.model, ModelKind::Mb3);
        assert_eq!(c.scenario.buffer().unwrap(), BufferSize::Bits(2_500_000));
        assert_eq!(c.arch.resolve(32, 32).unwrap().input, [32, 32, 255]);
        assert_eq!(c.training, TrainConfig::default());
    }

    #[test]
    fn conflicting_buffer_sizes_fail() {
        assert!(RunConfig::from_toml("[scenario]\nbuffer_samples = 3\nbuffer_bits = 9\n").is_err());
    }
}
