//! Declarative experiments, desk-scale recipes and their reports.

mod config;
pub mod recipes;
mod report;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use crate::data::{build_imbalanced, LabeledDataset, OodEvalPair, Split};
use crate::error::Result;
use crate::eval::{
    accuracy, affinity, classwise_confidence, eval_adversarial, ood_evaluate, ConfidenceReport, ShiftTransform,
};
use crate::io_util::{sha256_hex, write_atomic, DirLock};
use crate::model::{save_checkpoint, CheckpointMeta, ModelSpec};
use crate::rng::{self, tag};
use crate::train::{run_training, TrainOutcome, TrainingConfig};
use crate::transforms::PretextTask;

pub use config::{DataConfig, ExperimentConfig, ExperimentKind, ModelConfig, OUTPUT_DIR_ENV};
pub use recipes::{recipe_names, run_recipe, RecipeScale};
pub use report::{line_plot_svg, unix_now, Reference, Report, ReportRow, RunManifest, Series};

/// Memoizes trained models by what determines them: training config,
/// model spec and training-set checksum (names do not matter).
#[derive(Default)]
pub struct RunCache {
    runs: Mutex<HashMap<String, Arc<TrainOutcome>>>,
}

impl RunCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn key(config: &TrainingConfig, spec: &ModelSpec, train: &LabeledDataset) -> String {
        let text = format!(
            "{}|{}|{}",
            serde_json::to_string(config).expect("config serializes"),
            serde_json::to_string(spec).expect("spec serializes"),
            train.checksum()
        );
        sha256_hex(text.as_bytes())
    }

    pub fn train(&self, config: &TrainingConfig, spec: &ModelSpec, train: &LabeledDataset) -> Result<Arc<TrainOutcome>> {
        let key = Self::key(config, spec, train);
        if let Some(hit) = self.runs.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let out = Arc::new(run_training::<f32>(config, spec, train, None)?);
        self.runs.lock().expect("cache lock").insert(key, out.clone());
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.runs.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// What a finished experiment left behind.
pub struct ExperimentOutput {
    pub report: Report,
    pub manifest: RunManifest,
    pub dir: PathBuf,
}

fn arm_label(cfg: &ExperimentConfig, lambda: f64) -> String {
    match cfg.kind {
        ExperimentKind::LambdaSweep => format!("{}-lambda{}", cfg.name, lambda),
        _ => cfg.name.clone(),
    }
}

/// The training set after optional long-tailed subsampling.
pub fn training_set(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    let reg = cfg.data.registry()?;
    let train = reg.load(&cfg.data.train, Split::Train)?;
    match (&cfg.imbalance, cfg.kind) {
        (Some(spec), ExperimentKind::Imbalance) => build_imbalanced(&train, spec, &mut rng::stream(0, &[tag::SUBSAMPLE])),
        _ => Ok(train),
    }
}

/// Run every seed (and λ) of `cfg`, evaluate, and write checkpoints,
/// histories, report, plots and manifest under `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, cache: &RunCache) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let started_at = unix_now();
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| crate::Error::io(&dir, e))?;
    let _lock = DirLock::acquire(&dir)?;
    let reg = cfg.data.registry()?;
    let train = training_set(cfg)?;
    let test = reg.load(&cfg.data.test, Split::Test)?;
    let pairs = cfg
        .data
        .ood
        .iter()
        .map(|name| {
            let out = reg.load(name, Split::Test)?;
            Ok((name.clone(), OodEvalPair::new(test.clone(), out, cfg.data.resize)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let pretext_classes = cfg.training.pretext.num_classes();
    let spec = cfg.model.spec_for(&train, pretext_classes)?;
    let hash = cfg.hash();
    let mut report = Report::new(cfg.name.clone(), hash.clone(), cfg.seeds.clone());
    let mut artifacts = Vec::new();
    let lambdas = match cfg.kind {
        ExperimentKind::LambdaSweep => cfg.lambdas.clone(),
        _ => vec![cfg.training.lambda],
    };
    for &lambda in &lambdas {
        let arm = arm_label(cfg, lambda);
        for &seed in &cfg.seeds {
            let tcfg = TrainingConfig {
                lambda,
                seed,
                ..cfg.training.clone()
            };
            let run = cache.train(&tcfg, &spec, &train)?;
            let stem = format!("{arm}-seed{seed}");
            let ckpt = dir.join(format!("{stem}.ckpt"));
            let meta = CheckpointMeta {
                config_hash: hash.clone(),
                pretext_variant: tcfg.strategy.uses_transform().then(|| tcfg.pretext.variant.name().to_string()),
                epochs_trained: run.history.records.len(),
            };
            save_checkpoint(&run.model, &meta, &ckpt)?;
            let hist = dir.join(format!("{stem}.history.jsonl"));
            run.history.write(&hist)?;
            report.histories.insert(stem.clone(), run.history.checksum());
            artifacts.extend([ckpt, hist]);
            let mut metrics = Vec::new();
            let acc = accuracy(&run.model, &test)?;
            metrics.push(("accuracy".to_string(), acc.top1));
            if let Some(t5) = acc.top5 {
                metrics.push(("top5".to_string(), t5));
            }
            match cfg.kind {
                ExperimentKind::Ood | ExperimentKind::LambdaSweep | ExperimentKind::Classify | ExperimentKind::Imbalance => {
                    for (name, pair) in &pairs {
                        let r = ood_evaluate(&run.model, pair, cfg.score)?;
                        metrics.push((format!("auroc_{name}"), 100.0 * r.auroc));
                        report.raw.insert(format!("{stem}/{name}/in_scores"), r.in_scores);
                        report.raw.insert(format!("{stem}/{name}/out_scores"), r.out_scores);
                        if cfg.kind == ExperimentKind::Ood {
                            let conf = classwise_confidence(&run.model, pair)?;
                            let path = dir.join(format!("{stem}-{name}-confidence.svg"));
                            write_atomic(&path, confidence_svg(&conf, &format!("{stem} vs {name}")).as_bytes())?;
                            artifacts.push(path);
                        }
                    }
                }
                ExperimentKind::Affinity => {
                    let id = affinity(&run.model, &test, &ShiftTransform::Identity, seed)?;
                    metrics.push(("affinity_identity".to_string(), id.affinity));
                    for v in &cfg.affinity_transforms {
                        let t = ShiftTransform::Pretext {
                            task: PretextTask {
                                variant: *v,
                                ..cfg.training.pretext.clone()
                            },
                            exclude_identity: cfg.exclude_identity,
                        };
                        let a = affinity(&run.model, &test, &t, seed)?;
                        metrics.push((format!("affinity_{}", v.name()), a.affinity));
                    }
                }
                ExperimentKind::Adversarial => {
                    let adv = cfg.adversarial.clone().unwrap_or_default();
                    for &steps in &cfg.eval_steps {
                        let r = eval_adversarial(&run.model, &test, &adv, steps, seed)?;
                        metrics.push((format!("robust_pgd{steps}"), r.robust_accuracy));
                        metrics.push((format!("max_linf_pgd{steps}"), r.max_linf));
                    }
                }
            }
            report.push(arm.clone(), Some(seed), metrics);
        }
    }
    report.summarize();
    if cfg.kind == ExperimentKind::LambdaSweep {
        let path = dir.join("lambda-sweep.svg");
        write_atomic(&path, lambda_svg(&report, &lambdas, cfg).as_bytes())?;
        artifacts.push(path);
    }
    artifacts.extend(report.write(&dir)?);
    let manifest = RunManifest {
        config_hash: hash,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: cfg.seeds.clone(),
        started_at,
        finished_at: unix_now(),
        artifacts,
        report_checksum: report.checksum(),
    };
    manifest.write(&dir)?;
    Ok(ExperimentOutput { report, manifest, dir })
}

fn lambda_svg(report: &Report, lambdas: &[f64], cfg: &ExperimentConfig) -> String {
    let points: Vec<(f64, f64)> = lambdas
        .iter()
        .enumerate()
        .filter_map(|(i, l)| report.mean(&arm_label(cfg, *l), "accuracy").map(|a| (i as f64, a)))
        .collect();
    let ticks: Vec<String> = lambdas.iter().map(|l| l.to_string()).collect();
    line_plot_svg(
        "accuracy vs lambda",
        "lambda",
        "accuracy (%)",
        &[Series {
            label: "mean accuracy",
            points,
            dashed: false,
        }],
        &ticks,
    )
}

/// In-distribution class means dotted, out-of-distribution class means solid.
pub fn confidence_svg(conf: &ConfidenceReport, title: &str) -> String {
    let series = [
        Series {
            label: "in-distribution",
            points: conf.in_dist.iter().enumerate().map(|(i, c)| (i as f64, c.mean)).collect(),
            dashed: true,
        },
        Series {
            label: "out-of-distribution",
            points: conf.out_dist.iter().enumerate().map(|(i, c)| (i as f64, c.mean)).collect(),
            dashed: false,
        },
    ];
    let n = conf.in_dist.len().max(conf.out_dist.len());
    let ticks: Vec<String> = (0..n).map(|i| i.to_string()).collect();
    line_plot_svg(title, "class", "mean confidence", &series, &ticks)
}
