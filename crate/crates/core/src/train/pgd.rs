//! ℓ∞ projected gradient descent on the primary cross-entropy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::softmax_xent;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::model::{DualHeadModel, Heads};
use crate::nn::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub random_start: bool,
}

/// Project `x` into `[x0 - eps, x0 + eps] ∩ [0, 1]` so that the bound also
/// holds after rounding to `f32`.
fn project(x: f64, x0: f32, eps: f64) -> f32 {
    let c = f64::from(x0);
    let v = x.clamp(c - eps, c + eps).clamp(0.0, 1.0) as f32;
    let mut v = v;
    while f64::from(v) - c > eps {
        v = v.next_down();
    }
    while c - f64::from(v) > eps {
        v = v.next_up();
    }
    v
}

/// Untargeted PGD maximizing the primary-head loss.
///
/// With `epsilon == 0` or `steps == 0` the clean images are returned
/// unchanged. Random starts consume `rng` in image-major order.
pub fn pgd_attack<F: Real, R: Rng + ?Sized>(
    model: &DualHeadModel<F>,
    images: &[ImageTensor],
    labels: &[usize],
    cfg: &PgdConfig,
    rng: &mut R,
) -> Result<Vec<ImageTensor>> {
    if images.len() != labels.len() {
        return Err(Error::Shape(format!("{} images for {} labels", images.len(), labels.len())));
    }
    if images.is_empty() {
        return Err(Error::Empty { what: "batch" });
    }
    if !(cfg.epsilon >= 0.0 && cfg.alpha >= 0.0) {
        return Err(Error::config("pgd", "epsilon and alpha must be non-negative"));
    }
    if cfg.epsilon == 0.0 || cfg.steps == 0 {
        return Ok(images.to_vec());
    }
    let eps = cfg.epsilon;
    let mut adv: Vec<ImageTensor> = images.to_vec();
    if cfg.random_start {
        for (a, x0) in adv.iter_mut().zip(images) {
            for (v, &c) in a.data_mut().iter_mut().zip(x0.data()) {
                let delta: f64 = rng.gen_range(-eps..=eps);
                *v = project(f64::from(c) + delta, c, eps);
            }
        }
    }
    let n = images.len() as f64;
    for _ in 0..cfg.steps {
        let refs: Vec<&ImageTensor> = adv.iter().collect();
        let pass = model.forward_pass(&refs, Heads::PRIMARY)?;
        // Summed loss keeps per-sample gradients from shrinking with N.
        let xent = softmax_xent(pass.primary_logits.as_ref().expect("primary head requested"), labels, n)?;
        let grads = model.backward(pass, Some(&xent.dlogits), None, true);
        let g = grads.input.expect("input gradient requested");
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        let mut offset = 0;
        for (a, x0) in adv.iter_mut().zip(images) {
            let len = a.data().len();
            for ((v, &c), gv) in a.data_mut().iter_mut().zip(x0.data()).zip(&g[offset..offset + len]) {
                let s = gv.to_f64();
                let step = if s > 0.0 {
                    cfg.alpha
                } else if s < 0.0 {
                    -cfg.alpha
                } else {
                    0.0
                };
                *v = project(f64::from(*v) + step, c, eps);
            }
            offset += len;
        }
    }
    Ok(adv)
}
