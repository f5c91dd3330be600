//! Named desk-scale pipelines. Each prints the corresponding full-scale
//! numbers as references only.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{run_experiment, DataConfig, ExperimentConfig, ExperimentKind, ModelConfig, Reference, Report, RunCache};
use crate::data::synthetic::GlyphStyle;
use crate::data::{DatasetSource, ImbalanceSpec, ResizeRule, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::ScoreKind;
use crate::io_util::{sha256_hex, DirLock};
use crate::nn::BackboneSpec;
use crate::train::{AdversarialConfig, LrSchedule, OptimizerSpec, Strategy, TrainingConfig};
use crate::transforms::Variant;

const RECIPES: [&str; 6] = [
    "affinity-table2-desk",
    "strategy-table1-desk",
    "ood-table1-desk",
    "imbalance-mu001-desk",
    "lambda-sweep-desk",
    "adversarial-desk",
];

pub fn recipe_names() -> &'static [&'static str] {
    &RECIPES
}

/// Sizes of a recipe run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeScale {
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub train_count: usize,
    pub test_count: usize,
    pub ood_count: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    /// Per-class count before long-tailed subsampling.
    pub imbalance_per_class: usize,
    pub imbalance_epochs: usize,
    pub mus: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub adv_train_count: usize,
    pub adv_test_count: usize,
    pub adv_epochs: usize,
}

impl RecipeScale {
    /// Sized so that the whole acceptance suite fits a CPU-only machine.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            channels: vec![16, 32, 64],
            train_count: 10_000,
            test_count: 2_000,
            ood_count: 1_000,
            epochs: 8,
            batch_size: 64,
            seeds: vec![0, 1, 2],
            imbalance_per_class: 500,
            imbalance_epochs: 30,
            mus: vec![0.01, 0.02, 0.05],
            lambdas: vec![0.1, 0.3, 0.5],
            adv_train_count: 2_000,
            adv_test_count: 500,
            adv_epochs: 5,
        }
    }

    /// Seconds-scale version for tests and quick checks.
    pub fn smoke() -> Self {
        Self {
            image_size: 16,
            channels: vec![4, 8],
            train_count: 200,
            test_count: 60,
            ood_count: 40,
            epochs: 2,
            batch_size: 32,
            seeds: vec![0, 1],
            imbalance_per_class: 30,
            imbalance_epochs: 2,
            mus: vec![0.1],
            lambdas: vec![0.1, 0.5],
            adv_train_count: 40,
            adv_test_count: 20,
            adv_epochs: 1,
        }
    }
}

fn glyphs(count: usize, size: usize) -> DatasetSource {
    DatasetSource::Synthetic {
        spec: SyntheticSpec::Glyphs {
            count,
            size,
            seed: 0,
            style: GlyphStyle::default(),
        },
    }
}

fn datasets(scale: &RecipeScale, train_count: usize, test_count: usize) -> BTreeMap<String, DatasetSource> {
    let s = scale.image_size;
    let n = scale.ood_count;
    BTreeMap::from([
        ("glyphs-train".to_string(), glyphs(train_count, s)),
        ("glyphs-test".to_string(), glyphs(test_count, s)),
        (
            "textures".to_string(),
            DatasetSource::Synthetic {
                spec: SyntheticSpec::Textures {
                    count: n,
                    size: s,
                    seed: 0,
                },
            },
        ),
        (
            "held-out-glyphs".to_string(),
            DatasetSource::Synthetic {
                spec: SyntheticSpec::HeldOutGlyphs {
                    count: n,
                    size: s,
                    seed: 0,
                    style: GlyphStyle::default(),
                },
            },
        ),
    ])
}

/// Training settings shared by all recipes: Adam with cosine decay.
pub fn recipe_training(scale: &RecipeScale, strategy: Strategy, variant: Variant, epochs: usize) -> TrainingConfig {
    TrainingConfig {
        batch_size: scale.batch_size,
        optimizer: OptimizerSpec::Adam {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            schedule: LrSchedule::Cosine,
        },
        ..TrainingConfig::new(strategy, variant, epochs)
    }
}

struct Arm {
    name: &'static str,
    strategy: Strategy,
    variant: Variant,
}

const BASELINE: Arm = Arm {
    name: "baseline",
    strategy: Strategy::Baseline,
    variant: Variant::LoRotI,
};
const ROT_DA: Arm = Arm {
    name: "rot-da",
    strategy: Strategy::DataAugmentation,
    variant: Variant::GlobalRotation,
};
const ROT_MT: Arm = Arm {
    name: "rot-mt",
    strategy: Strategy::MultiTask,
    variant: Variant::GlobalRotation,
};
const LOROT_I: Arm = Arm {
    name: "lorot-i-mt",
    strategy: Strategy::MultiTask,
    variant: Variant::LoRotI,
};
const LOROT_E: Arm = Arm {
    name: "lorot-e-mt",
    strategy: Strategy::MultiTask,
    variant: Variant::LoRotE,
};

fn config(scale: &RecipeScale, arm: &Arm, kind: ExperimentKind, out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        name: arm.name.to_string(),
        kind,
        seeds: scale.seeds.clone(),
        output_dir: out.join(arm.name),
        data: DataConfig {
            registry: None,
            datasets: datasets(scale, scale.train_count, scale.test_count),
            train: "glyphs-train".into(),
            test: "glyphs-test".into(),
            ood: vec!["textures".into(), "held-out-glyphs".into()],
            resize: ResizeRule::Reject,
        },
        model: ModelConfig {
            backbone: BackboneSpec::Reference {
                channels: scale.channels.clone(),
            },
            ..ModelConfig::default()
        },
        training: recipe_training(scale, arm.strategy, arm.variant, scale.epochs),
        adversarial: None,
        imbalance: None,
        lambdas: scale.lambdas.clone(),
        score: ScoreKind::KlToUniform,
        eval_steps: vec![20, 100],
        affinity_transforms: vec![Variant::GlobalRotation, Variant::LoRotI, Variant::LoRotE],
        exclude_identity: false,
    }
}

fn reference(arm: &str, metric: &str, value: f64, source: &str) -> Reference {
    Reference {
        arm: arm.into(),
        metric: metric.into(),
        value,
        source: source.into(),
    }
}

const CIFAR: &str = "full-scale CIFAR-10, ResNet-18";

/// Run the configs of a recipe into one merged report.
fn run_all(name: &str, configs: &[ExperimentConfig], cache: &RunCache, references: Vec<Reference>) -> Result<Report> {
    let hashes: Vec<String> = configs.iter().map(|c| c.hash()).collect();
    let mut merged = Report::new(name, sha256_hex(hashes.join("|").as_bytes()), configs[0].seeds.clone());
    for cfg in configs {
        let out = run_experiment(cfg, cache)?;
        merged.rows.extend(out.report.rows);
        for (k, v) in out.report.raw {
            merged.raw.insert(format!("{}/{k}", cfg.name), v);
        }
        for (k, v) in out.report.histories {
            merged.histories.insert(format!("{}/{k}", cfg.name), v);
        }
    }
    merged.references = references;
    merged.summarize();
    Ok(merged)
}

fn recipe_configs(name: &str, scale: &RecipeScale, out: &Path) -> Result<(Vec<ExperimentConfig>, Vec<Reference>)> {
    Ok(match name {
        "affinity-table2-desk" => {
            let mut cfg = config(scale, &BASELINE, ExperimentKind::Affinity, out);
            cfg.seeds.truncate(1);
            (
                vec![cfg],
                vec![
                    reference("baseline", "affinity_global_rotation", 58.06, CIFAR),
                    reference("baseline", "affinity_lorot_i", 93.78, CIFAR),
                    reference("baseline", "affinity_lorot_e", 90.15, CIFAR),
                ],
            )
        }
        "strategy-table1-desk" => (
            [BASELINE, ROT_DA, ROT_MT, LOROT_I, LOROT_E]
                .iter()
                .map(|a| config(scale, a, ExperimentKind::Ood, out))
                .collect(),
            vec![
                reference("baseline", "accuracy", 95.01, CIFAR),
                reference("rot-da", "accuracy", 92.76, CIFAR),
                reference("rot-mt", "accuracy", 93.38, CIFAR),
                reference("lorot-i-mt", "accuracy", 95.92, CIFAR),
                reference("lorot-e-mt", "accuracy", 95.77, CIFAR),
            ],
        ),
        "ood-table1-desk" => (
            [BASELINE, LOROT_I, LOROT_E]
                .iter()
                .map(|a| config(scale, a, ExperimentKind::Ood, out))
                .collect(),
            vec![
                reference("baseline", "auroc_lsun", 90.9, CIFAR),
                reference("lorot-i-mt", "auroc_lsun", 98.6, CIFAR),
                reference("lorot-e-mt", "auroc_lsun", 98.7, CIFAR),
            ],
        ),
        "imbalance-mu001-desk" => {
            let mut configs = Vec::new();
            for &mu in &scale.mus {
                for arm in [BASELINE, LOROT_E] {
                    let mut cfg = config(scale, &arm, ExperimentKind::Imbalance, out);
                    cfg.name = format!("{}-mu{mu}", arm.name);
                    cfg.output_dir = out.join(&cfg.name);
                    cfg.data.datasets = datasets(scale, scale.imbalance_per_class * 10, scale.test_count);
                    cfg.data.ood.clear();
                    cfg.imbalance = Some(ImbalanceSpec::exponential(mu));
                    cfg.training.epochs = scale.imbalance_epochs;
                    configs.push(cfg);
                }
            }
            let lt = "full-scale long-tailed CIFAR-10, LDAM-DRW backbone recipe";
            let refs = [(0.01, 77.03, 81.82), (0.02, 80.94, 84.41), (0.05, 85.46, 86.67)]
                .iter()
                .flat_map(|&(mu, base, lorot)| {
                    [
                        reference(&format!("baseline-mu{mu}"), "accuracy", base, lt),
                        reference(&format!("lorot-e-mt-mu{mu}"), "accuracy", lorot, lt),
                    ]
                })
                .collect();
            (configs, refs)
        }
        "lambda-sweep-desk" => {
            let mut cfg = config(scale, &LOROT_I, ExperimentKind::LambdaSweep, out);
            cfg.data.ood = vec!["textures".into()];
            (
                vec![cfg],
                vec![
                    reference("lorot-i-mt-lambda0.1", "accuracy", 95.92, CIFAR),
                    reference("lorot-i-mt-lambda0.3", "accuracy", 95.72, CIFAR),
                    reference("lorot-i-mt-lambda0.5", "accuracy", 95.84, CIFAR),
                ],
            )
        }
        "adversarial-desk" => {
            let configs = [("adv-baseline", BASELINE), ("adv-lorot-e-mt", LOROT_E)]
                .into_iter()
                .map(|(name, arm)| {
                    let mut cfg = config(scale, &arm, ExperimentKind::Adversarial, out);
                    cfg.name = name.to_string();
                    cfg.output_dir = out.join(name);
                    cfg.seeds.truncate(1);
                    cfg.data.datasets = datasets(scale, scale.adv_train_count, scale.adv_test_count);
                    cfg.data.ood.clear();
                    cfg.training.epochs = scale.adv_epochs;
                    cfg.training.adversarial = Some(AdversarialConfig::default());
                    cfg.adversarial = Some(AdversarialConfig::default());
                    cfg
                })
                .collect();
            (
                configs,
                vec![
                    reference("adv-baseline", "robust_pgd20", 46.5, CIFAR),
                    reference("adv-baseline", "robust_pgd100", 46.5, CIFAR),
                    reference("adv-lorot-e-mt", "robust_pgd20", 52.8, CIFAR),
                    reference("adv-lorot-e-mt", "robust_pgd100", 52.8, CIFAR),
                ],
            )
        }
        other => {
            return Err(Error::UnknownRecipe {
                name: other.to_string(),
                available: RECIPES.join(", "),
            })
        }
    })
}

/// The experiment configs a recipe would run, without running them.
pub fn recipe_plan(name: &str, scale: &RecipeScale, out: &Path) -> Result<Vec<ExperimentConfig>> {
    recipe_configs(name, scale, out).map(|(c, _)| c)
}

/// Run recipe `name` under `out/<name>`; writes the merged report there.
pub fn run_recipe(name: &str, scale: &RecipeScale, out: &Path, cache: &RunCache) -> Result<Report> {
    let root = out.join(name);
    let (configs, refs) = recipe_configs(name, scale, &root)?;
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let _lock = DirLock::acquire(&root)?;
    let report = run_all(name, &configs, cache, refs)?;
    report.write(&root)?;
    Ok(report)
}
