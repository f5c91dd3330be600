use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Split};
use crate::error::{Error, Result};

/// Shape of the per-class retention factors υ_i.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImbalanceProfile {
    /// υ_i = μ^{i/(K-1)}.
    #[default]
    Exponential,
    /// υ_i = 1 for the first half of the classes, μ for the rest.
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImbalanceSpec {
    /// Ratio of the rarest to the most frequent class, in (0, 1].
    pub mu: f64,
    #[serde(default)]
    pub profile: ImbalanceProfile,
}

impl ImbalanceSpec {
    pub fn exponential(mu: f64) -> Self {
        Self {
            mu,
            profile: ImbalanceProfile::Exponential,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return Err(Error::config("imbalance.mu", format!("must be in (0, 1], got {}", self.mu)));
        }
        Ok(())
    }

    /// Retention factor of class `i` out of `classes`.
    pub fn factor(&self, i: usize, classes: usize) -> f64 {
        if classes <= 1 {
            return 1.0;
        }
        match self.profile {
            ImbalanceProfile::Exponential => self.mu.powf(i as f64 / (classes - 1) as f64),
            ImbalanceProfile::Step => {
                if i < classes / 2 {
                    1.0
                } else {
                    self.mu
                }
            }
        }
    }
}

/// Target count per class: `max(1, floor(n_i * υ_i))`.
pub fn imbalance_counts(original: &[usize], spec: &ImbalanceSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let k = original.len();
    Ok(original
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            if n == 0 {
                0
            } else {
                ((n as f64 * spec.factor(i, k)).floor() as usize).clamp(1, n)
            }
        })
        .collect())
}

/// Long-tailed copy of a training set.
///
/// Each class keeps a seeded random subset of its samples (no
/// duplicates); the relative order of kept samples is preserved. Test
/// splits are refused so that evaluation always uses the original set.
pub fn build_imbalanced<R: Rng + ?Sized>(
    dataset: &LabeledDataset,
    spec: &ImbalanceSpec,
    rng: &mut R,
) -> Result<LabeledDataset> {
    if dataset.split == Split::Test {
        return Err(Error::config("imbalance", "test splits are never subsampled"));
    }
    let targets = imbalance_counts(&dataset.class_counts(), spec)?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, (_, y)) in dataset.samples().iter().enumerate() {
        by_class[*y].push(i);
    }
    let mut keep = Vec::new();
    for (members, &target) in by_class.iter_mut().zip(&targets) {
        members.shuffle(rng);
        keep.extend_from_slice(&members[..target]);
    }
    keep.sort_unstable();
    let mut out = dataset.subset(&keep)?;
    out.name = format!("{}-lt{}", dataset.name, spec.mu);
    Ok(out)
}
