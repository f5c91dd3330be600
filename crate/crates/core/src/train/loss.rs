//! The multi-task objective
//!
//! ```text
//! L = -(1/N) Σ_i [ log P_u(y_i | x_i) + λ · log P_v(ŷ_i | x_i) ]
//! ```
//!
//! where `P_u` is the primary head, `P_v` the pretext head and `x_i` the
//! transformed input. Probabilities are floored at [`LOG_FLOOR`] before the
//! log.

use crate::error::{Error, Result};
use crate::model::{softmax_rows, Matrix};
use crate::nn::Real;

pub const LOG_FLOOR: f64 = 1e-12;

fn check_rows(probs: &Matrix<f64>, labels: &[usize]) -> Result<()> {
    if probs.rows != labels.len() {
        return Err(Error::Shape(format!(
            "{} probability rows for {} labels",
            probs.rows,
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= probs.cols) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: probs.cols,
        });
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under row-wise probabilities.
pub fn cross_entropy(probs: &Matrix<f64>, labels: &[usize]) -> Result<f64> {
    check_rows(probs, labels)?;
    if labels.is_empty() {
        return Err(Error::Empty { what: "batch" });
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs.row(i)[y].max(LOG_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Primary cross-entropy plus `lambda` times pretext cross-entropy.
pub fn multitask_loss(
    primary: &Matrix<f64>,
    pretext: &Matrix<f64>,
    labels: &[usize],
    pretext_labels: &[usize],
    lambda: f64,
) -> Result<f64> {
    let p = cross_entropy(primary, labels)?;
    if lambda == 0.0 {
        check_rows(pretext, pretext_labels)?;
        return Ok(p);
    }
    Ok(p + lambda * cross_entropy(pretext, pretext_labels)?)
}

/// Softmax cross-entropy on logits with its gradient.
pub(crate) struct SoftmaxXent<F> {
    /// Unweighted mean NLL.
    pub loss: f64,
    /// Gradient of `weight * loss` w.r.t. the logits.
    pub dlogits: Matrix<F>,
    pub correct: usize,
}

/// `weight * mean NLL` and its logit gradient `weight * (p - onehot) / N`.
pub(crate) fn softmax_xent<F: Real>(logits: &Matrix<F>, labels: &[usize], weight: f64) -> Result<SoftmaxXent<F>> {
    if logits.rows != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!("{} logit rows for {} labels", logits.rows, labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: logits.cols,
        });
    }
    let mut d = softmax_rows(logits);
    let n = labels.len() as f64;
    let scale = F::from_f64(weight / n);
    let mut loss = 0.0;
    let mut correct = 0;
    for (i, &y) in labels.iter().enumerate() {
        let row = d.row_mut(i);
        loss -= row[y].to_f64().max(LOG_FLOOR).ln();
        if argmax(row) == y {
            correct += 1;
        }
        row[y] -= F::ONE;
        row.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(SoftmaxXent {
        loss: loss / n,
        dlogits: d,
        correct,
    })
}

/// First index of the maximum.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(rows: usize, cols: usize) -> Matrix<f64> {
        Matrix {
            rows,
            cols,
            data: vec![1.0 / cols as f64; rows * cols],
        }
    }

    #[test]
    fn uniform_rows_closed_form() {
        let l = multitask_loss(&uniform(3, 10), &uniform(3, 16), &[0, 4, 9], &[1, 15, 0], 0.1).unwrap();
        let expect = 10f64.ln() + 0.1 * 16f64.ln();
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 2.579844).abs() < 1e-6);
    }

    #[test]
    fn lambda_zero_is_primary_ce() {
        let mut p = uniform(2, 4);
        p.data = vec![0.7, 0.1, 0.1, 0.1, 0.2, 0.2, 0.5, 0.1];
        let ce = cross_entropy(&p, &[0, 2]).unwrap();
        assert_eq!(multitask_loss(&p, &uniform(2, 16), &[0, 2], &[3, 3], 0.0).unwrap(), ce);
    }

    #[test]
    fn perfect_predictions_give_zero() {
        let one_hot = Matrix {
            rows: 1,
            cols: 3,
            data: vec![0.0, 1.0, 0.0],
        };
        assert_eq!(multitask_loss(&one_hot, &one_hot, &[1], &[1], 0.1).unwrap(), 0.0);
    }

    #[test]
    fn floor_keeps_loss_finite() {
        let one_hot = Matrix {
            rows: 1,
            cols: 2,
            data: vec![1.0, 0.0],
        };
        let l = cross_entropy(&one_hot, &[1]).unwrap();
        assert!((l - (-LOG_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(
            multitask_loss(&uniform(1, 10), &uniform(1, 4), &[10], &[0], 0.1),
            Err(Error::LabelOutOfRange { label: 10, classes: 10 })
        ));
        assert!(matches!(
            multitask_loss(&uniform(1, 10), &uniform(1, 4), &[0], &[4], 0.1),
            Err(Error::LabelOutOfRange { label: 4, classes: 4 })
        ));
    }

    #[test]
    fn xent_gradient_rows_sum_to_zero() {
        let logits = Matrix {
            rows: 2,
            cols: 3,
            data: vec![1.0f64, 2.0, 0.5, -1.0, 0.0, 3.0],
        };
        let r = softmax_xent(&logits, &[1, 0], 0.5).unwrap();
        for row in r.dlogits.iter_rows() {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
        assert_eq!(r.correct, 1);
    }
}
