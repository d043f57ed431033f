//! Experiment configuration file (TOML).
//!
//! ```toml
//! version = 1
//! name = "mnist-mlp"
//! output_dir = "runs"
//! seeds = [0, 1, 2]
//! n_points = 100
//! bn_mode = "interpolate"            # or "recalibrate"
//! barrier_definition = "max-endpoint" # or "linear-baseline"
//!
//! [model]
//! kind = "mlp"                       # or "resnet-mini"
//! hidden = [300, 100]
//! precision = "f32"
//!
//! [data]
//! kind = "mnist"                     # "cifar10" or "synthetic"
//! dir = "data/mnist"
//!
//! [train]
//! lr = 0.1
//! momentum = 0.9
//! batch_size = 64
//! iterations = 1874
//! ```
//!
//! Unknown keys are rejected. Model input shape and class count follow from
//! the dataset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::BarrierDefinition;
use crate::data::{load_cifar_dir, load_mnist_dir, synthetic_blobs, Dataset, Split};
use crate::error::{Error, Result};
use crate::interp::{BnMode, DEFAULT_POINTS};
use crate::nn::{Architecture, InputShape, ModelSpec, Precision, DEFAULT_EVAL_BATCH};
use crate::trainer::Hyperparams;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mlp,
    ResnetMini,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Hidden layer widths (mlp only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    /// Stage widths (resnet-mini only, default `[8, 16, 32]`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
    /// Residual blocks per stage (resnet-mini only, default 2).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks_per_stage: Option<usize>,
    /// Batch norm after every convolution (resnet-mini only, default true).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_norm: Option<bool>,
    #[serde(default)]
    pub precision: Precision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Mnist,
    Cifar10,
    Synthetic,
}

impl DataKind {
    pub fn name(self) -> &'static str {
        match self {
            DataKind::Mnist => "mnist",
            DataKind::Cifar10 => "cifar10",
            DataKind::Synthetic => "synthetic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Directory with the standard file names (mnist, cifar10).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Keep at most this many training examples per class (seeded).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_per_class: Option<usize>,
    /// Keep at most this many test examples per class (seeded).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_per_class: Option<usize>,
    #[serde(default)]
    pub subsample_seed: u64,
    /// Synthetic blobs: number of classes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    /// Synthetic blobs: input dimension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<usize>,
    /// Synthetic blobs: examples per class before the train/test split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class: Option<usize>,
    /// Synthetic blobs: distance of class centers from the origin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separation: Option<f64>,
    /// Synthetic blobs: generator seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_points() -> usize {
    DEFAULT_POINTS
}

fn default_eval_batch() -> usize {
    DEFAULT_EVAL_BATCH
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub name: String,
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_points")]
    pub n_points: usize,
    #[serde(default)]
    pub bn_mode: BnMode,
    #[serde(default)]
    pub barrier_definition: BarrierDefinition,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: Hyperparams,
}

/// Training and test splits for an experiment.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Dataset,
    pub test: Dataset,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 (hex) of the canonical TOML form with `output_dir` blanked,
    /// so the digest identifies what is computed rather than where it lands.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let d = Sha256::digest(c.to_toml().as_bytes());
        d.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            ));
        }
        if self.name.is_empty()
            || self.name.contains(['/', '\\'])
            || self.name == "."
            || self.name == ".."
        {
            return bad(format!(
                "experiment name {:?} is not a plain directory name",
                self.name
            ));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        if s.windows(2).any(|w| w[0] == w[1]) {
            return bad("seeds must be distinct".into());
        }
        if self.n_points < 2 {
            return bad(format!("n_points must be >= 2, got {}", self.n_points));
        }
        if self.eval_batch_size < 1 {
            return bad("eval_batch_size must be >= 1".into());
        }
        self.train
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.validate_model()?;
        self.validate_data()?;
        if self.bn_mode == BnMode::Recalibrate && self.model.kind == ModelKind::Mlp {
            return bad("bn_mode = \"recalibrate\" needs a model with batch norm".into());
        }
        Ok(())
    }

    fn validate_model(&self) -> Result<()> {
        let m = &self.model;
        let unused = |field: &str| {
            Err(Error::Config(format!(
                "model.{field} does not apply to kind {:?}",
                m.kind
            )))
        };
        match m.kind {
            ModelKind::Mlp => {
                if m.hidden.is_none() {
                    return Err(Error::Config("model.hidden is required for mlp".into()));
                }
                if m.widths.is_some() {
                    return unused("widths");
                }
                if m.blocks_per_stage.is_some() {
                    return unused("blocks_per_stage");
                }
                if m.batch_norm.is_some() {
                    return unused("batch_norm");
                }
            }
            ModelKind::ResnetMini => {
                if m.hidden.is_some() {
                    return unused("hidden");
                }
                if self.data.kind == DataKind::Synthetic {
                    return Err(Error::Config("resnet-mini needs image data".into()));
                }
            }
        }
        Ok(())
    }

    fn validate_data(&self) -> Result<()> {
        let d = &self.data;
        let unused = |field: &str| {
            Err(Error::Config(format!(
                "data.{field} does not apply to kind {:?}",
                d.kind.name()
            )))
        };
        let synthetic_fields = [
            ("classes", d.classes.is_some()),
            ("dims", d.dims.is_some()),
            ("per_class", d.per_class.is_some()),
            ("separation", d.separation.is_some()),
            ("seed", d.seed.is_some()),
        ];
        match d.kind {
            DataKind::Mnist | DataKind::Cifar10 => {
                if let Some((f, _)) = synthetic_fields.iter().find(|(_, set)| *set) {
                    return unused(f);
                }
            }
            DataKind::Synthetic => {
                if d.dir.is_some() {
                    return unused("dir");
                }
                if let Some((f, _)) = synthetic_fields.iter().find(|(_, set)| !*set) {
                    return Err(Error::Config(format!(
                        "data.{f} is required for synthetic data"
                    )));
                }
            }
        }
        if d.train_per_class == Some(0) || d.test_per_class == Some(0) {
            return Err(Error::Config(
                "per-class subsample sizes must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        match (&self.data.dir, self.data.kind) {
            (Some(d), _) => d.clone(),
            (None, DataKind::Mnist) => PathBuf::from("data/mnist"),
            (None, _) => PathBuf::from("data/cifar-10-batches-bin"),
        }
    }

    /// Loads (and subsamples) both splits.
    pub fn load_data(&self) -> Result<Datasets> {
        let d = &self.data;
        let (train, test) = match d.kind {
            DataKind::Mnist => {
                let dir = self.data_dir();
                (
                    load_mnist_dir(&dir, Split::Train)?,
                    load_mnist_dir(&dir, Split::Test)?,
                )
            }
            DataKind::Cifar10 => {
                let dir = self.data_dir();
                (
                    load_cifar_dir(&dir, Split::Train)?,
                    load_cifar_dir(&dir, Split::Test)?,
                )
            }
            DataKind::Synthetic => {
                let s = synthetic_blobs(
                    d.classes.unwrap_or_default(),
                    d.dims.unwrap_or_default(),
                    d.per_class.unwrap_or_default(),
                    d.separation.unwrap_or_default(),
                    d.seed.unwrap_or_default(),
                )?;
                (s.train, s.test)
            }
        };
        let train = match d.train_per_class {
            Some(k) => train.subsample_per_class(k, d.subsample_seed)?,
            None => train,
        };
        let test = match d.test_per_class {
            Some(k) => test.subsample_per_class(k, d.subsample_seed ^ 0x7465_7374)?,
            None => test,
        };
        Ok(Datasets { train, test })
    }

    /// Model spec for data of the given shape.
    pub fn model_spec(&self, input: InputShape, classes: usize) -> Result<ModelSpec> {
        let m = &self.model;
        let arch = match m.kind {
            ModelKind::Mlp => Architecture::Mlp {
                hidden: m.hidden.clone().unwrap_or_default(),
            },
            ModelKind::ResnetMini => {
                let Architecture::ResnetMini {
                    widths,
                    blocks_per_stage,
                    ..
                } = Architecture::resnet_mini_default(true)
                else {
                    unreachable!()
                };
                Architecture::ResnetMini {
                    widths: m.widths.clone().unwrap_or(widths),
                    blocks_per_stage: m.blocks_per_stage.unwrap_or(blocks_per_stage),
                    batch_norm: m.batch_norm.unwrap_or(true),
                }
            }
        };
        let spec = ModelSpec {
            arch,
            input,
            classes,
            precision: m.precision,
        };
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }

    /// Short model label used in output tables, e.g. `mlp-300-100`.
    pub fn model_label(spec: &ModelSpec) -> String {
        let join = |v: &[usize]| v.iter().map(|w| format!("-{w}")).collect::<String>();
        match &spec.arch {
            Architecture::Mlp { hidden } => format!("mlp{}", join(hidden)),
            Architecture::ResnetMini {
                widths, batch_norm, ..
            } => format!(
                "resnet-mini{}{}",
                join(widths),
                if *batch_norm { "-bn" } else { "" }
            ),
        }
    }
}
