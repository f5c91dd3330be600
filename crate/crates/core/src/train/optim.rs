use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamGroup;
use crate::nn::Real;

/// Per-epoch learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    /// Multiply by `gamma` at each milestone epoch.
    Step { milestones: Vec<usize>, gamma: f64 },
    /// Cosine decay from the base rate to zero over the run.
    Cosine,
}

impl LrSchedule {
    pub fn rate(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Step { milestones, gamma } => {
                base * gamma.powi(milestones.iter().filter(|&&m| epoch >= m).count() as i32)
            }
            LrSchedule::Cosine => {
                let t = epoch as f64 / epochs.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum OptimizerSpec {
    Sgd {
        lr: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default)]
        nesterov: bool,
        #[serde(default)]
        weight_decay: f64,
        #[serde(default = "default_schedule")]
        schedule: LrSchedule,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
        #[serde(default = "default_schedule")]
        schedule: LrSchedule,
    },
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_schedule() -> LrSchedule {
    LrSchedule::Constant
}

impl Default for OptimizerSpec {
    /// SGD with momentum 0.9, lr 0.1 and step decay, the classification
    /// recipe.
    fn default() -> Self {
        OptimizerSpec::Sgd {
            lr: 0.1,
            momentum: 0.9,
            nesterov: false,
            weight_decay: 5e-4,
            schedule: LrSchedule::Step {
                milestones: vec![],
                gamma: 0.1,
            },
        }
    }
}

impl OptimizerSpec {
    /// Adam with lr 1e-3, decayed by 0.1 at the midpoint (the OOD recipe).
    pub fn adam_ood(epochs: usize) -> Self {
        OptimizerSpec::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            schedule: LrSchedule::Step {
                milestones: vec![epochs / 2],
                gamma: 0.1,
            },
        }
    }

    pub fn base_lr(&self) -> f64 {
        match self {
            OptimizerSpec::Sgd { lr, .. } | OptimizerSpec::Adam { lr, .. } => *lr,
        }
    }

    pub fn schedule(&self) -> &LrSchedule {
        match self {
            OptimizerSpec::Sgd { schedule, .. } | OptimizerSpec::Adam { schedule, .. } => schedule,
        }
    }

    pub fn lr_at(&self, epoch: usize, epochs: usize) -> f64 {
        self.schedule().rate(self.base_lr(), epoch, epochs)
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.base_lr();
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        match self {
            OptimizerSpec::Sgd {
                momentum,
                weight_decay,
                ..
            } => {
                if !(0.0..1.0).contains(momentum) {
                    return Err(Error::config("optimizer.momentum", "must be in [0, 1)"));
                }
                if *weight_decay < 0.0 {
                    return Err(Error::config("optimizer.weight_decay", "must be non-negative"));
                }
            }
            OptimizerSpec::Adam {
                beta1,
                beta2,
                eps,
                weight_decay,
                ..
            } => {
                if !(0.0..1.0).contains(beta1) || !(0.0..1.0).contains(beta2) {
                    return Err(Error::config("optimizer.beta", "betas must be in [0, 1)"));
                }
                if *eps <= 0.0 || *weight_decay < 0.0 {
                    return Err(Error::config("optimizer.eps", "eps must be positive, decay non-negative"));
                }
            }
        }
        if let LrSchedule::Step { gamma, .. } = self.schedule() {
            if !(*gamma > 0.0) {
                return Err(Error::config("optimizer.schedule.gamma", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Stateful first-order optimizer over a model's parameter list.
///
/// Tensors whose gradient is `None`, or whose group is frozen, are left
/// untouched (no decay, no momentum update).
#[derive(Debug, Clone)]
pub struct Optimizer<F> {
    spec: OptimizerSpec,
    frozen: Vec<ParamGroup>,
    first: Vec<Vec<F>>,
    second: Vec<Vec<F>>,
    steps: Vec<u64>,
}

impl<F: Real> Optimizer<F> {
    pub fn new(spec: OptimizerSpec) -> Self {
        Self {
            spec,
            frozen: Vec::new(),
            first: Vec::new(),
            second: Vec::new(),
            steps: Vec::new(),
        }
    }

    pub fn freeze(mut self, group: ParamGroup) -> Self {
        self.frozen.push(group);
        self
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    pub fn step(&mut self, params: Vec<&mut [F]>, groups: &[ParamGroup], grads: &[Option<Vec<F>>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per tensor");
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![F::ZERO; p.len()]).collect();
            self.second = params.iter().map(|p| vec![F::ZERO; p.len()]).collect();
            self.steps = vec![0; params.len()];
        }
        for (idx, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if self.frozen.contains(&groups[idx]) {
                continue;
            }
            self.steps[idx] += 1;
            match self.spec {
                OptimizerSpec::Sgd {
                    momentum,
                    nesterov,
                    weight_decay,
                    ..
                } => {
                    let (lr, mu, wd) = (F::from_f64(lr), F::from_f64(momentum), F::from_f64(weight_decay));
                    let v = &mut self.first[idx];
                    for ((w, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                        let d = gi + wd * *w;
                        *vi = mu * *vi + d;
                        let upd = if nesterov { d + mu * *vi } else { *vi };
                        *w -= lr * upd;
                    }
                }
                OptimizerSpec::Adam {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                    ..
                } => {
                    let t = self.steps[idx] as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let step = F::from_f64(lr / c1);
                    let (b1, b2, wd) = (F::from_f64(beta1), F::from_f64(beta2), F::from_f64(weight_decay));
                    let (one_b1, one_b2) = (F::ONE - b1, F::ONE - b2);
                    let inv_c2 = F::from_f64(1.0 / c2);
                    let eps = F::from_f64(eps);
                    let (m, s) = (&mut self.first[idx], &mut self.second[idx]);
                    for (((w, &gi), mi), si) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(s.iter_mut()) {
                        let d = gi + wd * *w;
                        *mi = b1 * *mi + one_b1 * d;
                        *si = b2 * *si + one_b2 * d * d;
                        *w -= step * *mi / ((*si * inv_c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        let step = LrSchedule::Step {
            milestones: vec![2, 4],
            gamma: 0.1,
        };
        assert_eq!(step.rate(1.0, 1, 6), 1.0);
        assert!((step.rate(1.0, 2, 6) - 0.1).abs() < 1e-15);
        assert!((step.rate(1.0, 5, 6) - 0.01).abs() < 1e-15);
        assert_eq!(LrSchedule::Cosine.rate(0.4, 0, 10), 0.4);
        assert!((LrSchedule::Cosine.rate(0.4, 5, 10) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn sgd_minimizes_a_quadratic() {
        let mut w = vec![3.0f64, -2.0];
        let mut opt = Optimizer::new(OptimizerSpec::Sgd {
            lr: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
        });
        for _ in 0..200 {
            let g = vec![Some(w.clone())];
            opt.step(vec![&mut w[..]], &[ParamGroup::Extractor], &g, 0.1);
        }
        assert!(w.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut w = vec![1.0f64, 1.0];
        let mut opt = Optimizer::new(OptimizerSpec::adam_ood(10));
        let g = vec![Some(vec![0.5, -4.0])];
        opt.step(vec![&mut w[..]], &[ParamGroup::Extractor], &g, 1e-3);
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn none_and_frozen_are_untouched() {
        let mut a = vec![1.0f32];
        let mut b = vec![1.0f32];
        let mut opt = Optimizer::new(OptimizerSpec::default()).freeze(ParamGroup::Extractor);
        let g = vec![Some(vec![1.0]), None];
        opt.step(
            vec![&mut a[..], &mut b[..]],
            &[ParamGroup::Extractor, ParamGroup::PretextHead],
            &g,
            0.1,
        );
        assert_eq!((a[0], b[0]), (1.0, 1.0));
    }
}
