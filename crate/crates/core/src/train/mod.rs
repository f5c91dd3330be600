//! Training: the multi-task objective, integration strategies, PGD and the
//! epoch loop.

pub mod loss;
pub mod optim;
pub mod pgd;
pub mod run;
pub mod step;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transforms::{PretextTask, Variant};

pub use loss::{cross_entropy, multitask_loss, LOG_FLOOR};
pub use optim::{LrSchedule, Optimizer, OptimizerSpec};
pub use pgd::{pgd_attack, PgdConfig};
pub use run::{run_training, EpochRecord, TrainOutcome, TrainingHistory};
pub use step::{
    adversarial_train_step, objective_gradients, train_step_baseline, train_step_da, train_step_mt, train_step_pt,
    StepStats,
};

pub const DEFAULT_LAMBDA: f64 = 0.1;

/// How the pretext transform is combined with supervised training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Clean inputs, primary loss only.
    Baseline,
    /// Transformed inputs, primary loss only.
    #[serde(rename = "da")]
    DataAugmentation,
    /// One transformed batch feeds both heads.
    #[default]
    #[serde(rename = "mt")]
    MultiTask,
    /// Clean batch for the primary head, a separate transformed batch for
    /// the pretext head.
    #[serde(rename = "pt")]
    ParallelTask,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::DataAugmentation => "da",
            Strategy::MultiTask => "mt",
            Strategy::ParallelTask => "pt",
        }
    }

    pub fn uses_transform(self) -> bool {
        self != Strategy::Baseline
    }

    /// Whether the pretext head receives gradient at weight `lambda`.
    pub fn trains_pretext(self, lambda: f64) -> bool {
        matches!(self, Strategy::MultiTask | Strategy::ParallelTask) && lambda > 0.0
    }
}

/// Where the adversarial perturbation sits relative to the pretext
/// transform during adversarial training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbOrder {
    /// Rotate the patch, then attack the rotated image.
    #[default]
    TransformThenPerturb,
    /// Attack the clean image, then rotate the patch of the attacked image.
    PerturbThenTransform,
}

fn default_epsilon() -> f64 {
    8.0 / 255.0
}
fn default_train_steps() -> usize {
    10
}
fn default_train_alpha() -> f64 {
    2.0 / 255.0
}
fn default_eval_steps() -> Vec<usize> {
    vec![20, 100]
}
fn default_true() -> bool {
    true
}

/// ℓ∞ PGD settings for adversarial training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarialConfig {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_train_steps")]
    pub train_steps: usize,
    #[serde(default = "default_train_alpha")]
    pub train_alpha: f64,
    #[serde(default = "default_eval_steps")]
    pub eval_steps: Vec<usize>,
    #[serde(default = "default_true")]
    pub random_start: bool,
    #[serde(default)]
    pub order: PerturbOrder,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self {
            epsilon: default_epsilon(),
            train_steps: default_train_steps(),
            train_alpha: default_train_alpha(),
            eval_steps: default_eval_steps(),
            random_start: true,
            order: PerturbOrder::default(),
        }
    }
}

impl AdversarialConfig {
    /// Step size for a `steps`-step attack: 2/255 up to 20 steps,
    /// 0.3/255 for 100-step attacks, never above ε.
    pub fn alpha_for_steps(&self, steps: usize) -> f64 {
        let alpha: f64 = if steps >= 100 { 0.3 / 255.0 } else { 2.0 / 255.0 };
        alpha.min(self.epsilon)
    }

    pub fn train_attack(&self) -> PgdConfig {
        PgdConfig {
            epsilon: self.epsilon,
            alpha: self.train_alpha.min(self.epsilon),
            steps: self.train_steps,
            random_start: self.random_start,
        }
    }

    pub fn eval_attack(&self, steps: usize) -> PgdConfig {
        PgdConfig {
            epsilon: self.epsilon,
            alpha: self.alpha_for_steps(steps),
            steps,
            random_start: self.random_start,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon <= 1.0) {
            return Err(Error::config("adversarial.epsilon", "must be in [0, 1]"));
        }
        if !(self.train_alpha >= 0.0) || (self.epsilon > 0.0 && self.train_alpha > self.epsilon) {
            return Err(Error::config("adversarial.train_alpha", "must satisfy 0 <= alpha <= epsilon"));
        }
        if self.train_steps == 0 || self.eval_steps.contains(&0) {
            return Err(Error::config("adversarial.steps", "must be at least 1"));
        }
        Ok(())
    }
}

/// Standard augmentations applied before the pretext transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StandardAugment {
    /// Zero padding for random crops; 0 disables cropping.
    #[serde(default)]
    pub crop_padding: usize,
    #[serde(default)]
    pub horizontal_flip: bool,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}
fn default_batch() -> usize {
    128
}
fn default_pretext() -> PretextTask {
    PretextTask::new(Variant::LoRotI)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default = "default_pretext")]
    pub pretext: PretextTask,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub augment: StandardAugment,
    #[serde(default)]
    pub adversarial: Option<AdversarialConfig>,
}

impl TrainingConfig {
    pub fn new(strategy: Strategy, variant: Variant, epochs: usize) -> Self {
        Self {
            strategy,
            pretext: PretextTask::new(variant),
            lambda: DEFAULT_LAMBDA,
            batch_size: default_batch(),
            epochs,
            optimizer: OptimizerSpec::default(),
            seed: 0,
            augment: StandardAugment::default(),
            adversarial: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config("lambda", format!("must be a non-negative number, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.pretext.grid == 0 {
            return Err(Error::config("pretext.grid", "must be positive"));
        }
        self.optimizer.validate()?;
        if let Some(adv) = &self.adversarial {
            adv.validate()?;
        }
        Ok(())
    }
}
