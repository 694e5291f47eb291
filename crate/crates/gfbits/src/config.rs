//! Experiment configuration: a sectioned TOML file with strict unknown-key
//! rejection. Every field except the dataset section has a documented
//! default, so a minimal config is just a `[dataset]` table.

use crate::bitalloc::PenaltyNormalization;
use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::network::Arch;
use crate::superbatch::Policy;
use crate::trainer::{AlternationConfig, SuperBatchConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random stream in a run derives from it.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Static precision used for pretraining and as the constraint
    /// reference.
    #[serde(default = "default_static_bits")]
    pub static_bits: u32,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub alternation: AlternationSection,
}

fn default_seed() -> u64 {
    7
}

fn default_static_bits() -> u32 {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// "synthetic-gaussian", "idx", or "cifar-binary".
    pub source: String,
    /// Per-sample shape for the synthetic source.
    #[serde(default = "default_sample_shape")]
    pub shape: Vec<usize>,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_train_samples")]
    pub train_samples: usize,
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
    /// File paths for the idx / cifar-binary sources.
    #[serde(default)]
    pub train_images: Option<String>,
    #[serde(default)]
    pub train_labels: Option<String>,
    #[serde(default)]
    pub test_images: Option<String>,
    #[serde(default)]
    pub test_labels: Option<String>,
    #[serde(default)]
    pub train_file: Option<String>,
    #[serde(default)]
    pub test_file: Option<String>,
}

fn default_sample_shape() -> Vec<usize> {
    vec![16]
}

fn default_classes() -> usize {
    2
}

fn default_train_samples() -> usize {
    1000
}

fn default_test_samples() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// "mlp", "cnn-small", or "resnet-tiny".
    #[serde(default = "default_family")]
    pub family: String,
    #[serde(default = "default_input")]
    pub input: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: usize,
    #[serde(default = "default_input_shape")]
    pub input_shape: Vec<usize>,
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
}

fn default_family() -> String {
    "mlp".into()
}
fn default_input() -> usize {
    16
}
fn default_hidden() -> usize {
    16
}
fn default_hidden_layers() -> usize {
    1
}
fn default_input_shape() -> Vec<usize> {
    vec![1, 8, 8]
}
fn default_channels() -> Vec<usize> {
    vec![8, 8, 16, 16]
}
fn default_width() -> usize {
    8
}
fn default_blocks() -> usize {
    3
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            family: default_family(),
            input: default_input(),
            hidden: default_hidden(),
            hidden_layers: default_hidden_layers(),
            input_shape: default_input_shape(),
            channels: default_channels(),
            width: default_width(),
            blocks: default_blocks(),
            classes: default_classes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_lr_max")]
    pub lr_max: f64,
    #[serde(default = "default_warmup_epochs")]
    pub warmup_epochs: usize,
    #[serde(default = "default_mixup_alpha")]
    pub mixup_alpha: f64,
    #[serde(default)]
    pub hflip: bool,
    #[serde(default)]
    pub crop_padding: usize,
    #[serde(default)]
    pub mixup: bool,
}

fn default_epochs() -> usize {
    30
}
fn default_batch_size() -> usize {
    128
}
fn default_momentum() -> f64 {
    0.9
}
fn default_lr_max() -> f64 {
    0.1
}
fn default_warmup_epochs() -> usize {
    10
}
fn default_mixup_alpha() -> f64 {
    0.2
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            momentum: default_momentum(),
            lr_max: default_lr_max(),
            warmup_epochs: default_warmup_epochs(),
            mixup_alpha: default_mixup_alpha(),
            hflip: false,
            crop_padding: 0,
            mixup: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    #[serde(default = "default_beta")]
    pub beta1: f64,
    #[serde(default = "default_beta")]
    pub beta2: f64,
    #[serde(default = "default_rho")]
    pub rho1: f64,
    #[serde(default = "default_rho")]
    pub rho2: f64,
    /// "relative-to-target" (default) or "absolute". Relative units make
    /// the default rho meaningful regardless of model size.
    #[serde(default = "default_penalty_normalization")]
    pub penalty_normalization: String,
}

fn default_beta() -> f64 {
    0.7
}
fn default_rho() -> f64 {
    0.5
}
fn default_penalty_normalization() -> String {
    "relative-to-target".into()
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            beta1: default_beta(),
            beta2: default_beta(),
            rho1: default_rho(),
            rho2: default_rho(),
            penalty_normalization: default_penalty_normalization(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlternationSection {
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    #[serde(default = "default_gf_steps")]
    pub gf_steps: u32,
    #[serde(default = "default_gb_epochs")]
    pub gb_epochs: usize,
    #[serde(default = "default_evals_per_step")]
    pub evals_per_step: u32,
    #[serde(default = "default_sigma0")]
    pub sigma0: f64,
    #[serde(default = "default_superbatch_n")]
    pub superbatch_n: usize,
    #[serde(default = "default_superbatch_batch_size")]
    pub superbatch_batch_size: usize,
    #[serde(default = "default_policy")]
    pub superbatch_policy: String,
    /// Evaluate a whole generation against one frozen snapshot and
    /// advance the queue afterwards. Off by default: the default driver
    /// advances after every evaluation.
    #[serde(default)]
    pub frozen_snapshot: bool,
}

fn default_rounds() -> u32 {
    3
}
fn default_gf_steps() -> u32 {
    4
}
fn default_gb_epochs() -> usize {
    4
}
fn default_evals_per_step() -> u32 {
    512
}
fn default_sigma0() -> f64 {
    0.5
}
fn default_superbatch_n() -> usize {
    32
}
fn default_superbatch_batch_size() -> usize {
    128
}
fn default_policy() -> String {
    "SB".into()
}

impl Default for AlternationSection {
    fn default() -> Self {
        AlternationSection {
            rounds: default_rounds(),
            gf_steps: default_gf_steps(),
            gb_epochs: default_gb_epochs(),
            evals_per_step: default_evals_per_step(),
            sigma0: default_sigma0(),
            superbatch_n: default_superbatch_n(),
            superbatch_batch_size: default_superbatch_batch_size(),
            superbatch_policy: default_policy(),
            frozen_snapshot: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Canonical serialized form; parse -> serialize -> parse is a fixed
    /// point.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.train.momentum) {
            return Err(Error::Config(format!(
                "train.momentum {} outside [0, 1)",
                self.train.momentum
            )));
        }
        if self.train.warmup_epochs >= self.train.epochs {
            return Err(Error::Config(format!(
                "train.warmup_epochs {} must be below train.epochs {}",
                self.train.warmup_epochs, self.train.epochs
            )));
        }
        if self.train.mixup && self.train.mixup_alpha <= 0.0 {
            return Err(Error::Config("mixup enabled but mixup_alpha <= 0".into()));
        }
        if self.static_bits < 2 {
            return Err(Error::Config("static_bits must be >= 2".into()));
        }
        if self.alternation.rounds < 1
            || self.alternation.gf_steps < 1
            || self.alternation.gb_epochs < 1
        {
            return Err(Error::Config(
                "alternation rounds/gf_steps/gb_epochs must be >= 1".into(),
            ));
        }
        if self.alternation.sigma0 <= 0.0 {
            return Err(Error::Config("alternation.sigma0 must be positive".into()));
        }
        Policy::parse(&self.alternation.superbatch_policy)?;
        self.penalty_normalization()?;
        match self.dataset.source.as_str() {
            "synthetic-gaussian" | "idx" | "cifar-binary" => {}
            other => {
                return Err(Error::Config(format!(
                    "unknown dataset source {other:?}"
                )));
            }
        }
        self.arch()?;
        Ok(())
    }

    pub fn penalty_normalization(&self) -> Result<PenaltyNormalization> {
        match self.search.penalty_normalization.as_str() {
            "relative-to-target" => Ok(PenaltyNormalization::RelativeToTarget),
            "absolute" => Ok(PenaltyNormalization::Absolute),
            other => Err(Error::Config(format!(
                "unknown penalty normalization {other:?}"
            ))),
        }
    }

    pub fn arch(&self) -> Result<Arch> {
        let a = &self.arch;
        match a.family.as_str() {
            "mlp" => Ok(Arch::Mlp {
                input: a.input,
                hidden: a.hidden,
                hidden_layers: a.hidden_layers,
                classes: a.classes,
            }),
            "cnn-small" => {
                if a.channels.len() != 4 {
                    return Err(Error::Config(format!(
                        "cnn-small needs 4 channel counts, got {}",
                        a.channels.len()
                    )));
                }
                if a.input_shape.len() != 3 {
                    return Err(Error::Config("arch.input_shape must be [C, H, W]".into()));
                }
                Ok(Arch::CnnSmall {
                    input_shape: [a.input_shape[0], a.input_shape[1], a.input_shape[2]],
                    channels: [a.channels[0], a.channels[1], a.channels[2], a.channels[3]],
                    classes: a.classes,
                })
            }
            "resnet-tiny" => {
                if a.input_shape.len() != 3 {
                    return Err(Error::Config("arch.input_shape must be [C, H, W]".into()));
                }
                Ok(Arch::ResnetTiny {
                    input_shape: [a.input_shape[0], a.input_shape[1], a.input_shape[2]],
                    width: a.width,
                    blocks: a.blocks,
                    classes: a.classes,
                })
            }
            other => Err(Error::Config(format!("unknown architecture family {other:?}"))),
        }
    }

    /// Loads the train and test splits named by the dataset section.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.dataset;
        match d.source.as_str() {
            "synthetic-gaussian" => {
                let train = data::synthetic_gaussian(
                    &d.shape,
                    d.classes,
                    d.train_samples,
                    self.seed,
                    Split::Train,
                )?;
                let test = data::synthetic_gaussian(
                    &d.shape,
                    d.classes,
                    d.test_samples,
                    self.seed,
                    Split::Test,
                )?;
                Ok((train, test))
            }
            "idx" => {
                let need = |o: &Option<String>, key: &str| {
                    o.clone()
                        .ok_or_else(|| Error::Config(format!("dataset.{key} is required for idx")))
                };
                let train = data::load_idx(
                    Path::new(&need(&d.train_images, "train_images")?),
                    Path::new(&need(&d.train_labels, "train_labels")?),
                    Split::Train,
                )?;
                let test = data::load_idx(
                    Path::new(&need(&d.test_images, "test_images")?),
                    Path::new(&need(&d.test_labels, "test_labels")?),
                    Split::Test,
                )?;
                Ok((train, test))
            }
            "cifar-binary" => {
                let need = |o: &Option<String>, key: &str| {
                    o.clone().ok_or_else(|| {
                        Error::Config(format!("dataset.{key} is required for cifar-binary"))
                    })
                };
                let train = data::load_cifar_binary(
                    Path::new(&need(&d.train_file, "train_file")?),
                    Split::Train,
                )?;
                let test = data::load_cifar_binary(
                    Path::new(&need(&d.test_file, "test_file")?),
                    Split::Test,
                )?;
                Ok((train, test))
            }
            other => Err(Error::Config(format!("unknown dataset source {other:?}"))),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            momentum: self.train.momentum,
            lr_max: self.train.lr_max,
            warmup_epochs: self.train.warmup_epochs,
            mixup_alpha: self.train.mixup_alpha,
            hflip: self.train.hflip,
            crop_padding: self.train.crop_padding,
            mixup: self.train.mixup,
        }
    }

    pub fn alternation_config(&self) -> Result<AlternationConfig> {
        Ok(AlternationConfig {
            rounds: self.alternation.rounds,
            gf_steps: self.alternation.gf_steps,
            gb_epochs: self.alternation.gb_epochs,
            evals_per_step: self.alternation.evals_per_step,
            sigma0: self.alternation.sigma0,
            superbatch: SuperBatchConfig {
                n_minibatches: self.alternation.superbatch_n,
                batch_size: self.alternation.superbatch_batch_size,
                policy: Policy::parse(&self.alternation.superbatch_policy)?,
                frozen_snapshot: self.alternation.frozen_snapshot,
            },
        })
    }
}
