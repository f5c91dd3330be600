//! Measurements: accuracy, affinity, OOD scores and AUROC, class-wise
//! confidence, adversarial robustness and λ sweeps.

mod scores;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, OodEvalPair};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::model::{DualHeadModel, Matrix, ModelSpec};
use crate::nn::Real;
use crate::rng::{self, tag};
use crate::train::loss::argmax;
use crate::train::{pgd_attack, run_training, AdversarialConfig, TrainingConfig};
use crate::transforms::{transform_with_label, LoRotLabel, PretextTask, RotationDegree};

pub use scores::{auroc, auroc_brute_force, kl_to_uniform, max_softmax, ScoreKind};

/// Images per forward call during evaluation.
pub const EVAL_CHUNK: usize = 256;

/// Anything that maps images to class probabilities.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;
    /// One probability row per image.
    fn predict_proba(&self, images: &[&ImageTensor]) -> Result<Matrix<f64>>;
}

impl<F: Real> Classifier for DualHeadModel<F> {
    fn num_classes(&self) -> usize {
        self.spec().num_classes
    }

    fn predict_proba(&self, images: &[&ImageTensor]) -> Result<Matrix<f64>> {
        let mut out = Matrix::zeros(0, self.num_classes());
        for chunk in images.chunks(EVAL_CHUNK) {
            let p = self.predict_primary(chunk)?;
            out.rows += p.rows;
            out.data.extend(p.data);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// Percent.
    pub top1: f64,
    /// Percent; present when the model has at least 5 classes.
    pub top5: Option<f64>,
    pub count: usize,
}

/// Top-1 (and top-5) accuracy of probability rows. Ties in top-k are
/// broken toward lower class indices.
pub fn accuracy_from_probs(probs: &Matrix<f64>, labels: &[usize]) -> Result<AccuracyReport> {
    if labels.is_empty() {
        return Err(Error::Empty { what: "evaluation set" });
    }
    if probs.rows != labels.len() {
        return Err(Error::Shape(format!("{} rows for {} labels", probs.rows, labels.len())));
    }
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    for (row, &y) in probs.iter_rows().zip(labels) {
        if argmax(row) == y {
            top1 += 1;
        }
        let py = row[y];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(c, &p)| p > py || (p == py && c < y))
            .count();
        if rank < 5 {
            top5 += 1;
        }
    }
    let n = labels.len() as f64;
    Ok(AccuracyReport {
        top1: 100.0 * top1 as f64 / n,
        top5: (probs.cols >= 5).then(|| 100.0 * top5 as f64 / n),
        count: labels.len(),
    })
}

pub fn accuracy<M: Classifier + ?Sized>(model: &M, dataset: &LabeledDataset) -> Result<AccuracyReport> {
    if dataset.is_empty() {
        return Err(Error::Empty { what: "evaluation set" });
    }
    let probs = model.predict_proba(&dataset.images())?;
    accuracy_from_probs(&probs, &dataset.labels())
}

/// The transform whose distribution shift affinity measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ShiftTransform {
    Identity,
    Pretext {
        task: PretextTask,
        /// Draw only non-identity labels.
        #[serde(default)]
        exclude_identity: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffinityReport {
    pub clean_accuracy: f64,
    pub shifted_accuracy: f64,
    /// `100 * shifted / clean`.
    pub affinity: f64,
}

/// `D'_val`: one transform draw per image, sample `i` from stream
/// `(seed, EVAL, i)`.
pub fn shifted_dataset(dataset: &LabeledDataset, transform: &ShiftTransform, seed: u64) -> Result<LabeledDataset> {
    let ShiftTransform::Pretext { task, exclude_identity } = transform else {
        return Ok(dataset.clone());
    };
    let samples = dataset
        .samples()
        .par_iter()
        .enumerate()
        .map(|(i, (img, y))| {
            let mut r = rng::stream(seed, &[tag::EVAL, i as u64]);
            let label = if *exclude_identity {
                let per_cell = RotationDegree::ALL.len() - 1;
                let cells = task.num_classes() / RotationDegree::ALL.len();
                let pick = r.gen_range(0..cells * per_cell);
                LoRotLabel::decode(task, (pick / per_cell) * 4 + pick % per_cell + 1)?
            } else {
                crate::transforms::sample_label(&mut r, task)
            };
            Ok((transform_with_label(img, *y, task, label, &mut r)?.image, *y))
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(dataset.name.clone(), dataset.split, dataset.class_names.clone(), samples)
}

/// `100 * A(m, D'_val) / A(m, D_val)`.
pub fn affinity<M: Classifier + ?Sized>(
    model: &M,
    val: &LabeledDataset,
    transform: &ShiftTransform,
    seed: u64,
) -> Result<AffinityReport> {
    let clean = accuracy(model, val)?.top1;
    if clean == 0.0 {
        return Err(Error::UndefinedAffinity);
    }
    let shifted = match transform {
        ShiftTransform::Identity => clean,
        _ => accuracy(model, &shifted_dataset(val, transform, seed)?)?.top1,
    };
    Ok(AffinityReport {
        clean_accuracy: clean,
        shifted_accuracy: shifted,
        // equal accuracies give exactly 100, independent of rounding in the ratio
        affinity: if shifted == clean { 100.0 } else { 100.0 * shifted / clean },
    })
}

/// Per-sample scores of both sets and the AUROC between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodScoreReport {
    pub score_kind: ScoreKind,
    pub in_scores: Vec<f64>,
    pub out_scores: Vec<f64>,
    pub auroc: f64,
}

impl OodScoreReport {
    /// AUROC recomputed from the stored score vectors.
    pub fn recompute_auroc(&self) -> Result<f64> {
        auroc(&self.in_scores, &self.out_scores)
    }
}

fn score_rows(probs: &Matrix<f64>, kind: ScoreKind) -> Result<Vec<f64>> {
    probs.iter_rows().map(|row| kind.score(row)).collect()
}

/// Score both sets (higher = more in-distribution) and compute AUROC.
pub fn ood_evaluate<M: Classifier + ?Sized>(model: &M, pair: &OodEvalPair, kind: ScoreKind) -> Result<OodScoreReport> {
    let in_scores = score_rows(&model.predict_proba(&pair.in_dist.images())?, kind)?;
    let out_scores = score_rows(&model.predict_proba(&pair.out_dist.images())?, kind)?;
    let auroc = auroc(&in_scores, &out_scores)?;
    Ok(OodScoreReport {
        score_kind: kind,
        in_scores,
        out_scores,
        auroc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassConfidence {
    pub class: String,
    pub mean: f64,
    pub count: usize,
}

/// Mean max-softmax confidence per class, with the raw per-sample
/// confidences kept for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub in_dist: Vec<ClassConfidence>,
    pub out_dist: Vec<ClassConfidence>,
    pub in_confidence: Vec<f64>,
    pub in_labels: Vec<usize>,
    pub out_confidence: Vec<f64>,
    /// `None` when the out-of-distribution set had no usable labels.
    pub out_labels: Option<Vec<usize>>,
}

fn group_means(conf: &[f64], labels: Option<&[usize]>, names: &[String]) -> Vec<ClassConfidence> {
    let Some(labels) = labels else {
        return vec![ClassConfidence {
            class: "all".into(),
            mean: conf.iter().sum::<f64>() / conf.len().max(1) as f64,
            count: conf.len(),
        }];
    };
    let mut sums = vec![(0.0, 0usize); names.len()];
    for (c, &y) in conf.iter().zip(labels) {
        sums[y].0 += c;
        sums[y].1 += 1;
    }
    names
        .iter()
        .zip(sums)
        .filter(|(_, (_, n))| *n > 0)
        .map(|(name, (s, n))| ClassConfidence {
            class: name.clone(),
            mean: s / n as f64,
            count: n,
        })
        .collect()
}

impl ConfidenceReport {
    /// Group raw confidences; out-of-distribution labels are optional.
    pub fn from_scores(
        in_confidence: Vec<f64>,
        in_labels: Vec<usize>,
        in_names: &[String],
        out_confidence: Vec<f64>,
        out_labels: Option<Vec<usize>>,
        out_names: &[String],
    ) -> Self {
        let in_dist = group_means(&in_confidence, Some(&in_labels), in_names);
        let out_dist = group_means(&out_confidence, out_labels.as_deref(), out_names);
        Self {
            in_dist,
            out_dist,
            in_confidence,
            in_labels,
            out_confidence,
            out_labels,
        }
    }
}

pub fn classwise_confidence<M: Classifier + ?Sized>(model: &M, pair: &OodEvalPair) -> Result<ConfidenceReport> {
    let conf = |d: &LabeledDataset| -> Result<Vec<f64>> { score_rows(&model.predict_proba(&d.images())?, ScoreKind::MaxSoftmax) };
    Ok(ConfidenceReport::from_scores(
        conf(&pair.in_dist)?,
        pair.in_dist.labels(),
        &pair.in_dist.class_names,
        conf(&pair.out_dist)?,
        Some(pair.out_dist.labels()),
        &pair.out_dist.class_names,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub clean_accuracy: f64,
    /// Percent of samples classified correctly both clean and under attack.
    pub robust_accuracy: f64,
    pub steps: usize,
    pub epsilon: f64,
    pub alpha: f64,
    /// Largest ℓ∞ distance of any adversarial example from its source.
    pub max_linf: f64,
    pub count: usize,
}

/// Clean accuracy and accuracy under a `steps`-step PGD attack.
///
/// A sample counts as robust only if it is correct on the clean input and
/// on the adversarial one; the clean input lies inside the ε-ball, so this
/// is the accuracy against the stronger of the two.
pub fn eval_adversarial<F: Real>(
    model: &DualHeadModel<F>,
    dataset: &LabeledDataset,
    adv: &AdversarialConfig,
    steps: usize,
    seed: u64,
) -> Result<RobustnessReport> {
    if dataset.is_empty() {
        return Err(Error::Empty { what: "evaluation set" });
    }
    let attack = adv.eval_attack(steps);
    let mut clean_ok = 0usize;
    let mut robust_ok = 0usize;
    let mut max_linf = 0.0f64;
    for (c, chunk) in dataset.samples().chunks(EVAL_CHUNK).enumerate() {
        let images: Vec<ImageTensor> = chunk.iter().map(|(i, _)| i.clone()).collect();
        let labels: Vec<usize> = chunk.iter().map(|(_, y)| *y).collect();
        let refs: Vec<&ImageTensor> = images.iter().collect();
        let clean = model.predict_proba(&refs)?;
        let mut r = rng::stream(seed, &[tag::ATTACK, c as u64]);
        let attacked = pgd_attack(model, &images, &labels, &attack, &mut r)?;
        let adv_refs: Vec<&ImageTensor> = attacked.iter().collect();
        let robust = model.predict_proba(&adv_refs)?;
        for (i, &y) in labels.iter().enumerate() {
            let ok = argmax(clean.row(i)) == y;
            clean_ok += ok as usize;
            robust_ok += (ok && argmax(robust.row(i)) == y) as usize;
            for (a, b) in attacked[i].data().iter().zip(images[i].data()) {
                max_linf = max_linf.max((f64::from(*a) - f64::from(*b)).abs());
            }
        }
    }
    let n = dataset.len() as f64;
    Ok(RobustnessReport {
        clean_accuracy: 100.0 * clean_ok as f64 / n,
        robust_accuracy: 100.0 * robust_ok as f64 / n,
        steps,
        epsilon: attack.epsilon,
        alpha: attack.alpha,
        max_linf,
        count: dataset.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub auroc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LambdaSweep {
    pub rows: Vec<LambdaRow>,
}

impl LambdaSweep {
    /// `(λ, mean accuracy, mean AUROC)` per λ in first-seen order.
    pub fn means(&self) -> Vec<(f64, f64, Option<f64>)> {
        let mut lambdas: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !lambdas.contains(&r.lambda) {
                lambdas.push(r.lambda);
            }
        }
        lambdas
            .into_iter()
            .map(|l| {
                let rows: Vec<_> = self.rows.iter().filter(|r| r.lambda == l).collect();
                let n = rows.len() as f64;
                let acc = rows.iter().map(|r| r.accuracy).sum::<f64>() / n;
                let auroc = rows
                    .iter()
                    .map(|r| r.auroc)
                    .sum::<Option<f64>>()
                    .map(|s| s / n);
                (l, acc, auroc)
            })
            .collect()
    }

    /// Max minus min of the per-λ mean accuracies.
    pub fn accuracy_spread(&self) -> f64 {
        let means: Vec<f64> = self.means().into_iter().map(|(_, a, _)| a).collect();
        let max = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = means.iter().cloned().fold(f64::INFINITY, f64::min);
        if means.is_empty() {
            0.0
        } else {
            max - min
        }
    }
}

/// Train one model per `(λ, seed)` from `template` and evaluate it.
pub fn lambda_sweep(
    template: &TrainingConfig,
    model_spec: &ModelSpec,
    lambdas: &[f64],
    seeds: &[u64],
    train: &LabeledDataset,
    test: &LabeledDataset,
    ood: Option<&OodEvalPair>,
) -> Result<LambdaSweep> {
    if lambdas.is_empty() {
        return Err(Error::Empty { what: "lambda list" });
    }
    if seeds.is_empty() {
        return Err(Error::Empty { what: "seed list" });
    }
    let mut rows = Vec::new();
    for &lambda in lambdas {
        for &seed in seeds {
            let cfg = TrainingConfig {
                lambda,
                seed,
                ..template.clone()
            };
            let out = run_training::<f32>(&cfg, model_spec, train, None)?;
            let accuracy = accuracy(&out.model, test)?.top1;
            let auroc = match ood {
                Some(pair) => Some(ood_evaluate(&out.model, pair, ScoreKind::KlToUniform)?.auroc),
                None => None,
            };
            rows.push(LambdaRow {
                lambda,
                seed,
                accuracy,
                auroc,
            });
        }
    }
    Ok(LambdaSweep { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ResizeRule, Split, SyntheticSpec};
    use crate::transforms::Variant;

    /// Predicts one-hot on the true label of in-distribution images
    /// (identified by the first pixel) and uniform otherwise.
    struct Oracle {
        classes: usize,
    }

    impl Classifier for Oracle {
        fn num_classes(&self) -> usize {
            self.classes
        }
        fn predict_proba(&self, images: &[&ImageTensor]) -> Result<Matrix<f64>> {
            let rows = images
                .iter()
                .map(|img| {
                    let v = img.data()[0];
                    let mut row = vec![0.0; self.classes];
                    if v < 0.5 {
                        row[(v * 10.0).round() as usize] = 1.0;
                    } else {
                        row.iter_mut().for_each(|p| *p = 1.0 / self.classes as f64);
                    }
                    row
                })
                .collect::<Vec<_>>();
            Matrix::from_rows(&rows)
        }
    }

    fn oracle_set(n: usize, classes: usize, split: Split) -> LabeledDataset {
        let samples = (0..n)
            .map(|i| {
                let y = i % classes;
                (ImageTensor::filled(4, 4, 3, y as f32 / 10.0).unwrap(), y)
            })
            .collect();
        LabeledDataset::new("oracle", split, (0..classes).map(|c| c.to_string()).collect(), samples).unwrap()
    }

    fn ood_set(n: usize) -> LabeledDataset {
        let samples = (0..n).map(|i| (ImageTensor::filled(4, 4, 3, 0.9).unwrap(), i % 2)).collect();
        LabeledDataset::new("out", Split::Test, vec!["x".into(), "y".into()], samples).unwrap()
    }

    #[test]
    fn oracle_accuracy_auroc_and_confidence() {
        let m = Oracle { classes: 5 };
        let d = oracle_set(20, 5, Split::Test);
        let acc = accuracy(&m, &d).unwrap();
        assert_eq!((acc.top1, acc.top5), (100.0, Some(100.0)));
        let pair = OodEvalPair::new(d, ood_set(6), ResizeRule::Reject).unwrap();
        assert_eq!(ood_evaluate(&m, &pair, ScoreKind::KlToUniform).unwrap().auroc, 1.0);
        assert_eq!(ood_evaluate(&m, &pair, ScoreKind::MaxSoftmax).unwrap().auroc, 1.0);
        let conf = classwise_confidence(&m, &pair).unwrap();
        assert!(conf.in_dist.iter().all(|c| c.mean == 1.0));
        assert!(conf.out_dist.iter().all(|c| (c.mean - 0.2).abs() < 1e-15));
        assert_eq!(conf.out_dist.len(), 2);
    }

    #[test]
    fn constant_majority_predictor_on_balanced_test() {
        struct Constant;
        impl Classifier for Constant {
            fn num_classes(&self) -> usize {
                10
            }
            fn predict_proba(&self, images: &[&ImageTensor]) -> Result<Matrix<f64>> {
                let mut row = vec![0.0; 10];
                row[0] = 1.0;
                Matrix::from_rows(&vec![row; images.len()])
            }
        }
        let d = oracle_set(100, 10, Split::Test);
        assert_eq!(accuracy(&Constant, &d).unwrap().top1, 10.0);
    }

    #[test]
    fn affinity_identity_is_exactly_100_and_zero_clean_errors() {
        let m = Oracle { classes: 5 };
        let d = oracle_set(10, 5, Split::Val);
        let r = affinity(&m, &d, &ShiftTransform::Identity, 0).unwrap();
        assert_eq!(r.affinity, 100.0);
        let wrong: Vec<_> = d.samples().iter().map(|(i, y)| (i.clone(), (y + 1) % 5)).collect();
        let wrong = LabeledDataset::new("w", Split::Val, d.class_names.clone(), wrong).unwrap();
        assert!(matches!(
            affinity(&m, &wrong, &ShiftTransform::Identity, 0),
            Err(Error::UndefinedAffinity)
        ));
    }

    #[test]
    fn shifted_dataset_excluding_identity_changes_every_image() {
        let d = SyntheticSpec::StripedPatches {
            count: 30,
            size: 8,
            seed: 2,
        }
        .generate(Split::Val)
        .unwrap();
        for variant in [Variant::LoRotE, Variant::GlobalRotation] {
            let t = ShiftTransform::Pretext {
                task: PretextTask::new(variant),
                exclude_identity: true,
            };
            let s = shifted_dataset(&d, &t, 4).unwrap();
            let changed = s.samples().iter().zip(d.samples()).filter(|(a, b)| a.0 != b.0).count();
            assert!(changed >= 28, "{changed}");
            assert_eq!(s.labels(), d.labels());
        }
    }

    #[test]
    fn robust_never_exceeds_clean_and_zero_eps_matches() {
        let d = SyntheticSpec::TwoGaussianBlobs {
            count: 20,
            size: 8,
            seed: 0,
        }
        .generate(Split::Test)
        .unwrap();
        let spec = ModelSpec {
            backbone: crate::nn::BackboneSpec::Reference { channels: vec![4] },
            input: crate::model::InputSpec::unnormalized(8, 8, 3),
            num_classes: 2,
            pretext_classes: 4,
            primary_pooling: crate::model::PoolingMode::Gap,
            pretext_pooling: crate::model::PoolingMode::Gap,
        };
        let m = DualHeadModel::<f32>::new(spec, 1).unwrap();
        let zero = AdversarialConfig {
            epsilon: 0.0,
            ..AdversarialConfig::default()
        };
        let r0 = eval_adversarial(&m, &d, &zero, 20, 0).unwrap();
        assert_eq!(r0.robust_accuracy, r0.clean_accuracy);
        assert_eq!(r0.max_linf, 0.0);
        let r = eval_adversarial(&m, &d, &AdversarialConfig::default(), 20, 0).unwrap();
        assert!(r.robust_accuracy <= r.clean_accuracy);
        assert!(r.max_linf <= 8.0 / 255.0);
    }

    #[test]
    fn sweep_means_and_spread() {
        let s = LambdaSweep {
            rows: vec![
                LambdaRow {
                    lambda: 0.1,
                    seed: 0,
                    accuracy: 80.0,
                    auroc: None,
                },
                LambdaRow {
                    lambda: 0.1,
                    seed: 1,
                    accuracy: 82.0,
                    auroc: None,
                },
                LambdaRow {
                    lambda: 0.3,
                    seed: 0,
                    accuracy: 80.5,
                    auroc: None,
                },
            ],
        };
        assert_eq!(s.means()[0].1, 81.0);
        assert!((s.accuracy_spread() - 0.5).abs() < 1e-12);
    }
}
