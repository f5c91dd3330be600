//! The epoch loop.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::step::{adversarial_batch, train_step_baseline, train_step_da, train_step_mt, train_step_pt, StepStats};
use super::{pgd_attack, Optimizer, Strategy, TrainingConfig};
use crate::data::{augment, LabeledDataset};
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::image::ImageTensor;
use crate::io_util::{sha256_hex, write_atomic};
use crate::model::{DualHeadModel, ModelSpec};
use crate::nn::Real;
use crate::rng::{self, tag};
use crate::transforms::transform_batch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean objective over the epoch.
    pub loss: f64,
    pub primary_loss: f64,
    pub pretext_loss: f64,
    /// Primary accuracy (percent) on the inputs the primary loss saw.
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    /// Samples pushed through the feature extractor this epoch.
    pub forwarded_samples: u64,
    pub seed: u64,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }

    /// Digest of every field except wall time, which is not reproducible.
    pub fn checksum(&self) -> String {
        let mut stripped = self.clone();
        for r in &mut stripped.records {
            r.wall_time_secs = 0.0;
        }
        sha256_hex(stripped.to_jsonl().as_bytes())
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

pub struct TrainOutcome<F: Real = f32> {
    pub model: DualHeadModel<F>,
    pub history: TrainingHistory,
}

#[derive(Default)]
struct Totals {
    loss: f64,
    primary: f64,
    pretext: f64,
    correct: usize,
    samples: usize,
    forwarded: u64,
}

impl Totals {
    fn add(&mut self, s: &StepStats) {
        let n = s.samples as f64;
        self.loss += s.loss * n;
        self.primary += s.primary_loss * n;
        self.pretext += s.pretext_loss * n;
        self.correct += s.correct;
        self.samples += s.samples;
        self.forwarded += s.forwarded as u64;
    }
}

/// Train a fresh model from `config`.
///
/// All randomness comes from streams of `config.seed`: initialization,
/// per-epoch shuffling, per-sample augmentation, per-batch pretext draws
/// and per-batch attack starts. With `epochs = 0` the initialized model is
/// returned with an empty history.
pub fn run_training<F: Real>(
    config: &TrainingConfig,
    model_spec: &ModelSpec,
    train: &LabeledDataset,
    val: Option<&LabeledDataset>,
) -> Result<TrainOutcome<F>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty { what: "training set" });
    }
    if train.num_classes() != model_spec.num_classes {
        return Err(Error::config(
            "model.num_classes",
            format!("dataset has {} classes, model {}", train.num_classes(), model_spec.num_classes),
        ));
    }
    if config.strategy.uses_transform() {
        let (h, w, _) = train.image_shape().expect("non-empty");
        config.pretext.check_image(h, w)?;
        if model_spec.pretext_classes != config.pretext.num_classes() {
            return Err(Error::config(
                "model.pretext_classes",
                format!("pretext task has {} classes, model {}", config.pretext.num_classes(), model_spec.pretext_classes),
            ));
        }
    }
    let mut model = DualHeadModel::<F>::new(model_spec.clone(), config.seed)?;
    let mut opt = Optimizer::new(config.optimizer.clone());
    let mut history = TrainingHistory::default();
    let seed = config.seed;
    let samples = train.samples();
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let lr = config.optimizer.lr_at(epoch, config.epochs);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[tag::SHUFFLE, epoch as u64]));
        let mut totals = Totals::default();
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let key = [epoch as u64, b as u64];
            let clean: Vec<(ImageTensor, usize)> = chunk
                .iter()
                .map(|&i| {
                    let (img, y) = &samples[i];
                    let mut r = rng::stream(seed, &[tag::AUGMENT, epoch as u64, i as u64]);
                    (augment(img, &config.augment, &mut r), *y)
                })
                .collect();
            let mut attack_rng = rng::stream(seed, &[tag::ATTACK, key[0], key[1]]);
            let transformed = if config.strategy.uses_transform() {
                let mut r = rng::stream(seed, &[tag::TRANSFORM, key[0], key[1]]);
                Some(transform_batch(&clean, &config.pretext, &mut r)?)
            } else {
                None
            };
            let adv = config.adversarial.as_ref();
            let stats = match (config.strategy, transformed) {
                (Strategy::Baseline, _) => {
                    let batch = match adv {
                        Some(a) => attack_clean(&model, &clean, a, &mut attack_rng)?,
                        None => clean,
                    };
                    train_step_baseline(&mut model, &mut opt, &batch, lr)?
                }
                (Strategy::DataAugmentation, Some(t)) => {
                    let t = match adv {
                        Some(a) => adversarial_batch(&model, &t, &clean, a, &mut attack_rng)?,
                        None => t,
                    };
                    train_step_da(&mut model, &mut opt, &t, lr)?
                }
                (Strategy::MultiTask, Some(t)) => {
                    let t = match adv {
                        Some(a) => adversarial_batch(&model, &t, &clean, a, &mut attack_rng)?,
                        None => t,
                    };
                    train_step_mt(&mut model, &mut opt, &t, config.lambda, lr)?
                }
                (Strategy::ParallelTask, Some(t)) => {
                    let clean = match adv {
                        Some(a) => attack_clean(&model, &clean, a, &mut attack_rng)?,
                        None => clean,
                    };
                    train_step_pt(&mut model, &mut opt, &clean, &t, config.lambda, lr)?
                }
                (_, None) => unreachable!("transforming strategies always build a batch"),
            };
            if !stats.loss.is_finite() {
                return Err(Error::NonFiniteGradient);
            }
            totals.add(&stats);
        }
        let n = totals.samples.max(1) as f64;
        let val_accuracy = match val {
            Some(v) => Some(accuracy(&model, v)?.top1),
            None => None,
        };
        history.records.push(EpochRecord {
            epoch,
            lr,
            loss: totals.loss / n,
            primary_loss: totals.primary / n,
            pretext_loss: totals.pretext / n,
            train_accuracy: 100.0 * totals.correct as f64 / n,
            val_accuracy,
            forwarded_samples: totals.forwarded,
            seed,
            wall_time_secs: start.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome { model, history })
}

fn attack_clean<F: Real>(
    model: &DualHeadModel<F>,
    clean: &[(ImageTensor, usize)],
    adv: &super::AdversarialConfig,
    r: &mut rng::StreamRng,
) -> Result<Vec<(ImageTensor, usize)>> {
    let images: Vec<ImageTensor> = clean.iter().map(|(i, _)| i.clone()).collect();
    let labels: Vec<usize> = clean.iter().map(|(_, y)| *y).collect();
    let attacked = pgd_attack(model, &images, &labels, &adv.train_attack(), r)?;
    Ok(attacked.into_iter().zip(labels).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Split, SyntheticSpec};
    use crate::model::{InputSpec, PoolingMode};
    use crate::nn::BackboneSpec;
    use crate::train::{LrSchedule, OptimizerSpec};
    use crate::transforms::Variant;

    fn data() -> LabeledDataset {
        SyntheticSpec::TwoGaussianBlobs {
            count: 64,
            size: 8,
            seed: 0,
        }
        .generate(Split::Train)
        .unwrap()
    }

    fn spec(pretext_classes: usize) -> ModelSpec {
        ModelSpec {
            backbone: BackboneSpec::Reference { channels: vec![4, 8] },
            input: InputSpec::unnormalized(8, 8, 3),
            num_classes: 2,
            pretext_classes,
            primary_pooling: PoolingMode::Gap,
            pretext_pooling: PoolingMode::Gap,
        }
    }

    fn config(strategy: Strategy, variant: Variant, epochs: usize) -> TrainingConfig {
        TrainingConfig {
            batch_size: 16,
            optimizer: OptimizerSpec::Sgd {
                lr: 0.05,
                momentum: 0.9,
                nesterov: false,
                weight_decay: 5e-4,
                schedule: LrSchedule::Constant,
            },
            seed: 3,
            ..TrainingConfig::new(strategy, variant, epochs)
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let d = data();
        let out = run_training::<f32>(&config(Strategy::MultiTask, Variant::LoRotI, 0), &spec(4), &d, None).unwrap();
        assert!(out.history.records.is_empty());
        let init = DualHeadModel::<f32>::new(spec(4), 3).unwrap();
        assert_eq!(out.model.param_checksum(), init.param_checksum());
    }

    #[test]
    fn reruns_are_identical_and_counts_match_strategy() {
        let d = data();
        let cfg = config(Strategy::ParallelTask, Variant::LoRotE, 2);
        let a = run_training::<f32>(&cfg, &spec(16), &d, Some(&d)).unwrap();
        let b = run_training::<f32>(&cfg, &spec(16), &d, Some(&d)).unwrap();
        assert_eq!(a.history.checksum(), b.history.checksum());
        assert_eq!(a.model.param_checksum(), b.model.param_checksum());
        assert_eq!(a.history.records[0].forwarded_samples, 128);
        let mt = run_training::<f32>(&config(Strategy::MultiTask, Variant::LoRotE, 1), &spec(16), &d, None).unwrap();
        assert_eq!(mt.history.records[0].forwarded_samples, 64);
    }

    #[test]
    fn history_round_trips_and_ignores_wall_time() {
        let d = data();
        let out = run_training::<f32>(&config(Strategy::Baseline, Variant::LoRotI, 2), &spec(4), &d, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.jsonl");
        out.history.write(&path).unwrap();
        let mut back = TrainingHistory::read(&path).unwrap();
        assert_eq!(back, out.history);
        back.records[0].wall_time_secs += 10.0;
        assert_eq!(back.checksum(), out.history.checksum());
    }

    #[test]
    fn learns_the_blob_task() {
        let d = data();
        let mut cfg = config(Strategy::MultiTask, Variant::LoRotI, 6);
        cfg.batch_size = 8;
        let out = run_training::<f32>(&cfg, &spec(4), &d, Some(&d)).unwrap();
        let last = out.history.last().unwrap();
        assert!(last.val_accuracy.unwrap() > 90.0, "{last:?}");
    }

    #[test]
    fn mismatched_heads_are_rejected() {
        let d = data();
        assert!(run_training::<f32>(&config(Strategy::MultiTask, Variant::LoRotE, 1), &spec(4), &d, None).is_err());
    }
}
