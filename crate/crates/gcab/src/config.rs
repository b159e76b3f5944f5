//! Experiment configuration: TOML schema, validation, and hashing.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::tensor::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionMode {
    F32,
    F64,
}

impl PrecisionMode {
    pub fn as_precision(self) -> Precision {
        match self {
            PrecisionMode::F32 => Precision::F32,
            PrecisionMode::F64 => Precision::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneReg {
    None,
    Fd,
    Pfr1,
    Pfr2,
}

impl BackboneReg {
    pub fn projector_layers(self) -> usize {
        match self {
            BackboneReg::Pfr1 => 1,
            BackboneReg::Pfr2 => 2,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    SoftmaxCe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth,
    Idx,
    Manifest,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub patch: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default = "default_true")]
    pub classifier_layernorm: bool,
}

fn default_mlp_ratio() -> f64 {
    4.0
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub num_classes: usize,
    #[serde(default)]
    pub per_class: usize,
    #[serde(default)]
    pub image_size: usize,
    #[serde(default)]
    pub difficulty: f64,
    #[serde(default)]
    pub images: Option<PathBuf>,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

impl DataConfig {
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            num_classes: self.num_classes,
            per_class: self.per_class,
            image_size: self.image_size,
            difficulty: self.difficulty,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitScheme {
    Equal,
    LargerFirst,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub scheme: SplitScheme,
    /// Number of tasks (for larger_first: number of *rest* tasks after the
    /// first large one).
    pub tasks: usize,
    #[serde(default)]
    pub first: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lambda_pfr")]
    pub lambda_pfr: f64,
    #[serde(default = "default_lambda_gcab")]
    pub lambda_gcab: f64,
    #[serde(default = "default_s_max")]
    pub s_max: f64,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default = "default_distill_lr")]
    pub distill_lr: f64,
    #[serde(default = "default_distill_epochs")]
    pub distill_epochs: usize,
}

fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    128
}
fn default_lambda_pfr() -> f64 {
    0.001
}
fn default_lambda_gcab() -> f64 {
    0.05
}
fn default_s_max() -> f64 {
    800.0
}
fn default_loss() -> LossKind {
    LossKind::Bce
}
fn default_distill_lr() -> f64 {
    5e-3
}
fn default_distill_epochs() -> usize {
    200
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    #[serde(default = "default_true")]
    pub gca: bool,
    #[serde(default = "default_reg")]
    pub backbone_reg: BackboneReg,
    #[serde(default = "default_true")]
    pub fdc: bool,
    #[serde(default)]
    pub freeze_backbone_after_task1: bool,
    #[serde(default)]
    pub binarize_at_accumulate: bool,
}

fn default_reg() -> BackboneReg {
    BackboneReg::Pfr2
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            gca: true,
            backbone_reg: BackboneReg::Pfr2,
            fdc: true,
            freeze_backbone_after_task1: false,
            binarize_at_accumulate: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: PrecisionMode,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub arch: ArchConfig,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

fn default_precision() -> PrecisionMode {
    PrecisionMode::F64
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.lambda_pfr < 0.0 || t.lambda_gcab < 0.0 {
            return Err(Error::Config("lambda_pfr and lambda_gcab must be >= 0".into()));
        }
        if t.s_max <= 1.0 {
            return Err(Error::Config(format!("s_max must be > 1, got {}", t.s_max)));
        }
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.arch.embed_dim % self.arch.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.arch.embed_dim, self.arch.heads
            )));
        }
        if self.split.tasks == 0 {
            return Err(Error::Config("split.tasks must be positive".into()));
        }
        match self.split.scheme {
            SplitScheme::Equal => {
                if self.data.num_classes % self.split.tasks != 0 {
                    return Err(Error::Config(format!(
                        "num_classes {} not divisible into {} equal tasks",
                        self.data.num_classes, self.split.tasks
                    )));
                }
            }
            SplitScheme::LargerFirst => {
                let first = self.split.first.ok_or_else(|| {
                    Error::Config("split.first required for larger_first".into())
                })?;
                if first >= self.data.num_classes
                    || (self.data.num_classes - first) % self.split.tasks != 0
                {
                    return Err(Error::Config(format!(
                        "larger_first({first}) leaves {} classes not divisible by {}",
                        self.data.num_classes - first.min(self.data.num_classes),
                        self.split.tasks
                    )));
                }
            }
        }
        match self.data.source {
            DataSource::Synth => {
                if self.data.per_class == 0 || self.data.image_size == 0 {
                    return Err(Error::Config(
                        "data.per_class and data.image_size required for synth source".into(),
                    ));
                }
            }
            DataSource::Idx => {
                if self.data.images.is_none() || self.data.labels.is_none() {
                    return Err(Error::Config(
                        "data.images and data.labels required for idx source".into(),
                    ));
                }
            }
            DataSource::Manifest => {
                if self.data.dir.is_none() {
                    return Err(Error::Config("data.dir required for manifest source".into()));
                }
            }
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        match self.split.scheme {
            SplitScheme::Equal => self.split.tasks,
            SplitScheme::LargerFirst => self.split.tasks + 1,
        }
    }

    /// Hash of the canonical serialized form (insensitive to formatting
    /// and key order in the source file).
    pub fn hash(&self) -> String {
        let canon = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canon.as_bytes());
        let mut out = String::with_capacity(16);
        for b in &digest[..8] {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    /// Output root: explicit field, else $GCAB_OUT, else ./runs.
    pub fn output_root(&self) -> PathBuf {
        if let Some(d) = &self.output_dir {
            return d.clone();
        }
        std::env::var_os("GCAB_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}
