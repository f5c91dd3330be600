//! Single optimizer steps for each integration strategy.

use rand::Rng;

use super::loss::softmax_xent;
use super::pgd::pgd_attack;
use super::{AdversarialConfig, PerturbOrder};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::model::{DualHeadModel, Gradients, Heads};
use crate::nn::Real;
use crate::train::Optimizer;
use crate::transforms::{apply_lorot, TransformedSample};

/// Losses and counts of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    /// Objective value (primary + λ · pretext).
    pub loss: f64,
    pub primary_loss: f64,
    pub pretext_loss: f64,
    /// Correct primary predictions among the primary-loss inputs.
    pub correct: usize,
    pub samples: usize,
    /// Samples pushed through the extractor.
    pub forwarded: usize,
}

/// Objective value and gradients from a single extractor pass.
///
/// The pretext term is included only when `pretext_labels` is given and
/// `lambda > 0`; otherwise the pretext head is not evaluated and gets no
/// gradient.
pub fn objective_gradients<F: Real>(
    model: &DualHeadModel<F>,
    images: &[&ImageTensor],
    labels: &[usize],
    pretext_labels: Option<&[usize]>,
    lambda: f64,
    input_grad: bool,
) -> Result<(StepStats, Gradients<F>)> {
    let pretext = pretext_labels.filter(|_| lambda > 0.0);
    let heads = Heads {
        primary: true,
        pretext: pretext.is_some(),
    };
    let pass = model.forward_pass(images, heads)?;
    let primary = softmax_xent(pass.primary_logits.as_ref().expect("primary head requested"), labels, 1.0)?;
    let aux = match pretext {
        Some(pl) => Some(softmax_xent(
            pass.pretext_logits.as_ref().expect("pretext head requested"),
            pl,
            lambda,
        )?),
        None => None,
    };
    let pretext_loss = aux.as_ref().map_or(0.0, |a| a.loss);
    let stats = StepStats {
        loss: primary.loss + lambda * pretext_loss,
        primary_loss: primary.loss,
        pretext_loss,
        correct: primary.correct,
        samples: images.len(),
        forwarded: images.len(),
    };
    let grads = model.backward(pass, Some(&primary.dlogits), aux.as_ref().map(|a| &a.dlogits), input_grad);
    Ok((stats, grads))
}

/// Gradient of `lambda * CE(pretext)` alone, from its own extractor pass.
fn pretext_gradients<F: Real>(
    model: &DualHeadModel<F>,
    images: &[&ImageTensor],
    pretext_labels: &[usize],
    lambda: f64,
) -> Result<(f64, Gradients<F>)> {
    let pass = model.forward_pass(images, Heads::PRETEXT)?;
    let aux = softmax_xent(pass.pretext_logits.as_ref().expect("pretext head requested"), pretext_labels, lambda)?;
    let grads = model.backward(pass, None, Some(&aux.dlogits), false);
    Ok((aux.loss, grads))
}

fn apply<F: Real>(model: &mut DualHeadModel<F>, opt: &mut Optimizer<F>, grads: &Gradients<F>, lr: f64) {
    let groups = model.param_groups();
    opt.step(model.params_mut(), &groups, &grads.params, lr);
}

fn split(batch: &[TransformedSample]) -> (Vec<&ImageTensor>, Vec<usize>, Vec<usize>) {
    let images = batch.iter().map(|s| &s.image).collect();
    let labels = batch.iter().map(|s| s.primary_label).collect();
    let pretext = batch.iter().map(|s| s.pretext_label.index()).collect();
    (images, labels, pretext)
}

fn check_nonempty<T>(batch: &[T]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty { what: "batch" });
    }
    Ok(())
}

/// Multi-task step: the transformed batch feeds both heads in one pass.
pub fn train_step_mt<F: Real>(
    model: &mut DualHeadModel<F>,
    opt: &mut Optimizer<F>,
    batch: &[TransformedSample],
    lambda: f64,
    lr: f64,
) -> Result<StepStats> {
    check_nonempty(batch)?;
    let (images, labels, pretext) = split(batch);
    let (stats, grads) = objective_gradients(model, &images, &labels, Some(&pretext), lambda, false)?;
    apply(model, opt, &grads, lr);
    Ok(stats)
}

/// Augmentation step: transformed inputs, primary loss only.
pub fn train_step_da<F: Real>(
    model: &mut DualHeadModel<F>,
    opt: &mut Optimizer<F>,
    batch: &[TransformedSample],
    lr: f64,
) -> Result<StepStats> {
    check_nonempty(batch)?;
    let (images, labels, _) = split(batch);
    let (stats, grads) = objective_gradients(model, &images, &labels, None, 0.0, false)?;
    apply(model, opt, &grads, lr);
    Ok(stats)
}

/// Plain supervised step on clean inputs.
pub fn train_step_baseline<F: Real>(
    model: &mut DualHeadModel<F>,
    opt: &mut Optimizer<F>,
    batch: &[(ImageTensor, usize)],
    lr: f64,
) -> Result<StepStats> {
    check_nonempty(batch)?;
    let images: Vec<_> = batch.iter().map(|(i, _)| i).collect();
    let labels: Vec<_> = batch.iter().map(|(_, y)| *y).collect();
    let (stats, grads) = objective_gradients(model, &images, &labels, None, 0.0, false)?;
    apply(model, opt, &grads, lr);
    Ok(stats)
}

/// Parallel-task step: two extractor passes, clean batch for the primary
/// loss and transformed batch for the pretext loss.
pub fn train_step_pt<F: Real>(
    model: &mut DualHeadModel<F>,
    opt: &mut Optimizer<F>,
    clean: &[(ImageTensor, usize)],
    transformed: &[TransformedSample],
    lambda: f64,
    lr: f64,
) -> Result<StepStats> {
    check_nonempty(clean)?;
    check_nonempty(transformed)?;
    let images: Vec<_> = clean.iter().map(|(i, _)| i).collect();
    let labels: Vec<_> = clean.iter().map(|(_, y)| *y).collect();
    let (mut stats, mut grads) = objective_gradients(model, &images, &labels, None, 0.0, false)?;
    let (t_images, _, t_pretext) = split(transformed);
    let (aux_loss, aux) = pretext_gradients(model, &t_images, &t_pretext, lambda)?;
    // At lambda = 0 the pretext pass still runs but contributes nothing.
    if lambda > 0.0 {
        for (g, a) in grads.params.iter_mut().zip(aux.params) {
            match (g.as_mut(), a) {
                (Some(g), Some(a)) => g.iter_mut().zip(a).for_each(|(x, y)| *x += y),
                (None, Some(a)) => *g = Some(a),
                _ => {}
            }
        }
    }
    stats.pretext_loss = aux_loss;
    stats.loss = stats.primary_loss + lambda * aux_loss;
    stats.forwarded += t_images.len();
    apply(model, opt, &grads, lr);
    Ok(stats)
}

/// Multi-task step on PGD adversarial examples of the transformed batch.
///
/// With `adv = None` this is exactly [`train_step_mt`].
pub fn adversarial_train_step<F: Real, R: Rng + ?Sized>(
    model: &mut DualHeadModel<F>,
    opt: &mut Optimizer<F>,
    batch: &[TransformedSample],
    clean: &[(ImageTensor, usize)],
    lambda: f64,
    adv: Option<&AdversarialConfig>,
    rng: &mut R,
    lr: f64,
) -> Result<StepStats> {
    let Some(adv) = adv else {
        return train_step_mt(model, opt, batch, lambda, lr);
    };
    check_nonempty(batch)?;
    let adversarial = adversarial_batch(model, batch, clean, adv, rng)?;
    train_step_mt(model, opt, &adversarial, lambda, lr)
}

/// The transformed batch with its images replaced by PGD adversaries.
pub(crate) fn adversarial_batch<F: Real, R: Rng + ?Sized>(
    model: &DualHeadModel<F>,
    batch: &[TransformedSample],
    clean: &[(ImageTensor, usize)],
    adv: &AdversarialConfig,
    rng: &mut R,
) -> Result<Vec<TransformedSample>> {
    let attack = adv.train_attack();
    let labels: Vec<usize> = batch.iter().map(|s| s.primary_label).collect();
    let perturbed = match adv.order {
        PerturbOrder::TransformThenPerturb => {
            let images: Vec<ImageTensor> = batch.iter().map(|s| s.image.clone()).collect();
            pgd_attack(model, &images, &labels, &attack, rng)?
        }
        PerturbOrder::PerturbThenTransform => {
            if clean.len() != batch.len() {
                return Err(Error::Shape("clean and transformed batches differ in size".into()));
            }
            let images: Vec<ImageTensor> = clean.iter().map(|(i, _)| i.clone()).collect();
            let attacked = pgd_attack(model, &images, &labels, &attack, rng)?;
            attacked
                .iter()
                .zip(batch)
                .map(|(img, s)| apply_lorot(img, &s.patch, s.pretext_label.rotation()))
                .collect::<Result<_>>()?
        }
    };
    Ok(batch
        .iter()
        .zip(perturbed)
        .map(|(s, image)| TransformedSample { image, ..s.clone() })
        .collect())
}
