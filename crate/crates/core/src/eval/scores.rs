use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|Σp - 1|` for a probability row.
pub const ROW_TOLERANCE: f64 = 1e-6;

/// Per-sample in-distribution score; higher means more in-distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    #[default]
    KlToUniform,
    MaxSoftmax,
}

impl ScoreKind {
    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::KlToUniform => "kl",
            ScoreKind::MaxSoftmax => "max_softmax",
        }
    }

    pub fn score(self, row: &[f64]) -> Result<f64> {
        match self {
            ScoreKind::KlToUniform => kl_to_uniform(row),
            ScoreKind::MaxSoftmax => max_softmax(row),
        }
    }
}

fn check_row(row: &[f64]) -> Result<()> {
    if row.is_empty() {
        return Err(Error::InvalidProbabilities("empty row".into()));
    }
    if let Some(p) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::InvalidProbabilities(format!("entry {p}")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_TOLERANCE {
        return Err(Error::InvalidProbabilities(format!("row sums to {sum}")));
    }
    Ok(())
}

/// `KL(p || uniform) = Σ p_c ln(C p_c)` with `0 ln 0 = 0`.
pub fn kl_to_uniform(row: &[f64]) -> Result<f64> {
    check_row(row)?;
    let c = row.len() as f64;
    let kl: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| p * (c * p).ln()).sum();
    // Rounding can push a near-uniform row a hair below zero.
    Ok(kl.max(0.0))
}

pub fn max_softmax(row: &[f64]) -> Result<f64> {
    check_row(row)?;
    Ok(row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

fn check_scores(in_scores: &[f64], out_scores: &[f64]) -> Result<()> {
    if in_scores.is_empty() || out_scores.is_empty() {
        return Err(Error::Empty { what: "score vector" });
    }
    if in_scores.iter().chain(out_scores).any(|s| s.is_nan()) {
        return Err(Error::InvalidProbabilities("NaN score".into()));
    }
    Ok(())
}

/// P(in > out) + ½ P(in = out), from mid-ranks of the pooled scores.
///
/// The numerator is accumulated in half-units so that the result is
/// bit-identical to [`auroc_brute_force`].
pub fn auroc(in_scores: &[f64], out_scores: &[f64]) -> Result<f64> {
    check_scores(in_scores, out_scores)?;
    let mut pooled: Vec<(f64, bool)> = in_scores
        .iter()
        .map(|&s| (s, true))
        .chain(out_scores.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the rank sum of the in-distribution scores (ranks from 1).
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        // Mid-rank of positions i+1..=j is (i+1+j)/2.
        let twice_mid = (i + 1 + j) as u128;
        let ins = pooled[i..j].iter().filter(|p| p.1).count() as u128;
        twice_rank_sum += twice_mid * ins;
        i = j;
    }
    let n = in_scores.len() as u128;
    let m = out_scores.len() as u128;
    // 2U = 2R - n(n+1).
    let twice_u = twice_rank_sum - n * (n + 1);
    Ok(twice_u as f64 / (2 * n * m) as f64)
}

/// O(n·m) pair count; the reference for [`auroc`].
pub fn auroc_brute_force(in_scores: &[f64], out_scores: &[f64]) -> Result<f64> {
    check_scores(in_scores, out_scores)?;
    let mut twice: u128 = 0;
    for &a in in_scores {
        for &b in out_scores {
            if a > b {
                twice += 2;
            } else if a == b {
                twice += 1;
            }
        }
    }
    Ok(twice as f64 / (2 * in_scores.len() as u128 * out_scores.len() as u128) as f64)
}
