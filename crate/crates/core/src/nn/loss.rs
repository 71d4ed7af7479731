use ndarray::Array2;

use crate::{Error, Result};

pub const PROB_FLOOR: f64 = 1e-12;

fn check_labels(probs: &Array2<f64>, labels: &[usize]) -> Result<()> {
    if probs.nrows() != labels.len() {
        return Err(Error::Dimension {
            context: "loss labels",
            expected: probs.nrows(),
            actual: labels.len(),
        });
    }
    if probs.nrows() == 0 {
        return Err(Error::Empty("loss batch".into()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= probs.ncols()) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: probs.ncols(),
        });
    }
    Ok(())
}

/// Mean negative log-likelihood of the true class, with probabilities
/// floored at 1e-12.
pub fn cross_entropy(probs: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[[i, y]].max(PROB_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// d cross_entropy / d logits for a softmax output: `(p - onehot) / batch`.
pub fn cross_entropy_logit_grad(probs: &Array2<f64>, labels: &[usize]) -> Result<Array2<f64>> {
    check_labels(probs, labels)?;
    let n = labels.len() as f64;
    let mut grad = probs / n;
    for (i, &y) in labels.iter().enumerate() {
        grad[[i, y]] -= 1.0 / n;
    }
    Ok(grad)
}

/// Mean binary cross-entropy of sigmoid outputs (one column) against 0/1
/// targets, floored like [`cross_entropy`].
pub fn binary_cross_entropy(probs: &Array2<f64>, targets: &[f64]) -> Result<f64> {
    if probs.ncols() != 1 || probs.nrows() != targets.len() {
        return Err(Error::Dimension {
            context: "binary cross-entropy",
            expected: targets.len(),
            actual: probs.nrows(),
        });
    }
    let total: f64 = probs
        .column(0)
        .iter()
        .zip(targets)
        .map(|(&p, &t)| -(t * p.max(PROB_FLOOR).ln() + (1.0 - t) * (1.0 - p).max(PROB_FLOOR).ln()))
        .sum();
    Ok(total / targets.len() as f64)
}
