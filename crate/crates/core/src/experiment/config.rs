use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSource, ImbalanceSpec, LabeledDataset, Registry, ResizeRule};
use crate::error::{Error, Result};
use crate::eval::ScoreKind;
use crate::io_util::sha256_hex;
use crate::model::{InputSpec, ModelSpec, PoolingMode};
use crate::nn::BackboneSpec;
use crate::train::{AdversarialConfig, TrainingConfig};
use crate::transforms::Variant;

/// Environment variable that replaces `output_dir`. It never changes the
/// config hash.
pub const OUTPUT_DIR_ENV: &str = "LOROT_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Classify,
    Ood,
    Imbalance,
    Adversarial,
    Affinity,
    LambdaSweep,
}

fn default_backbone() -> BackboneSpec {
    BackboneSpec::Reference {
        channels: vec![16, 32, 64],
    }
}
fn default_mean() -> f32 {
    0.5
}
fn default_std() -> f32 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_backbone")]
    pub backbone: BackboneSpec,
    #[serde(default)]
    pub primary_pooling: PoolingMode,
    #[serde(default)]
    pub pretext_pooling: PoolingMode,
    /// Per-channel normalization applied to `[0, 1]` pixels.
    #[serde(default = "default_mean")]
    pub mean: f32,
    #[serde(default = "default_std")]
    pub std: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: default_backbone(),
            primary_pooling: PoolingMode::Gap,
            pretext_pooling: PoolingMode::Gap,
            mean: default_mean(),
            std: default_std(),
        }
    }
}

impl ModelConfig {
    /// Model for `dataset`'s image shape and class count.
    pub fn spec_for(&self, dataset: &LabeledDataset, pretext_classes: usize) -> Result<ModelSpec> {
        let (h, w, c) = dataset.image_shape().ok_or(Error::Empty { what: "training set" })?;
        let spec = ModelSpec {
            backbone: self.backbone.clone(),
            input: InputSpec {
                mean: vec![self.mean; c],
                std: vec![self.std; c],
                ..InputSpec::unnormalized(h, w, c)
            },
            num_classes: dataset.num_classes(),
            pretext_classes,
            primary_pooling: self.primary_pooling,
            pretext_pooling: self.pretext_pooling,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Registry file; entries in `datasets` take precedence.
    #[serde(default)]
    pub registry: Option<PathBuf>,
    #[serde(default)]
    pub datasets: BTreeMap<String, DatasetSource>,
    pub train: String,
    pub test: String,
    #[serde(default)]
    pub ood: Vec<String>,
    #[serde(default)]
    pub resize: ResizeRule,
}

impl DataConfig {
    pub fn registry(&self) -> Result<Registry> {
        let mut reg = match &self.registry {
            Some(path) => Registry::from_file(path)?,
            None => Registry::default(),
        };
        for (name, src) in &self.datasets {
            reg.insert(name.clone(), src.clone());
        }
        Ok(reg)
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_lambdas() -> Vec<f64> {
    vec![0.1, 0.3, 0.5]
}
fn default_eval_steps() -> Vec<usize> {
    vec![20, 100]
}
fn default_affinity_transforms() -> Vec<Variant> {
    vec![Variant::GlobalRotation, Variant::LoRotI, Variant::LoRotE]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// A complete, hashable experiment description (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub kind: ExperimentKind,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub training: TrainingConfig,
    /// Attack settings for `adversarial` experiments (evaluation side).
    #[serde(default)]
    pub adversarial: Option<AdversarialConfig>,
    #[serde(default)]
    pub imbalance: Option<ImbalanceSpec>,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub score: ScoreKind,
    #[serde(default = "default_eval_steps")]
    pub eval_steps: Vec<usize>,
    #[serde(default = "default_affinity_transforms")]
    pub affinity_transforms: Vec<Variant>,
    #[serde(default)]
    pub exclude_identity: bool,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse, apply the output-directory override, validate. Relative
    /// paths resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = toml::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let Some(reg) = &mut cfg.data.registry {
            if reg.is_relative() {
                *reg = base.join(&*reg);
            }
        }
        cfg.apply_env();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            self.output_dir = PathBuf::from(dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        self.training.validate().map_err(|e| match e {
            Error::InvalidConfig { field, reason } => Error::InvalidConfig {
                field: format!("training.{field}"),
                reason,
            },
            other => other,
        })?;
        if let Some(adv) = &self.adversarial {
            adv.validate()?;
        }
        match self.kind {
            ExperimentKind::Imbalance => self
                .imbalance
                .as_ref()
                .ok_or_else(|| Error::config("imbalance", "required for imbalance experiments"))?
                .validate()?,
            ExperimentKind::Ood if self.data.ood.is_empty() => {
                return Err(Error::config("data.ood", "ood experiments need at least one dataset"))
            }
            ExperimentKind::LambdaSweep if self.lambdas.is_empty() => {
                return Err(Error::config("lambdas", "need at least one value"))
            }
            ExperimentKind::LambdaSweep | ExperimentKind::Classify | ExperimentKind::Ood => {}
            ExperimentKind::Adversarial | ExperimentKind::Affinity => {}
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(Error::config("lambdas", format!("must be non-negative, got {l}")));
        }
        if !(self.model.std > 0.0) {
            return Err(Error::config("model.std", "must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form with `output_dir` blanked.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }
}
