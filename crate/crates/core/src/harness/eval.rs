//! Subject-level evaluation by majority vote over window predictions.

use ndarray::Array2;
use serde::Serialize;

use crate::data::{SubjectFeatures, ASD, HC};
use crate::{Error, Result};

/// ASD iff strictly more than half of the window predictions are ASD; an
/// exact tie goes to HC.
pub fn majority_vote(window_predictions: &[usize]) -> Result<usize> {
    if window_predictions.is_empty() {
        return Err(Error::Empty("majority vote over zero windows".into()));
    }
    let asd = window_predictions.iter().filter(|&&p| p == ASD).count();
    Ok(if 2 * asd > window_predictions.len() { ASD } else { HC })
}

/// Row-wise argmax; the lowest class index wins ties.
pub fn argmax_rows(probs: &Array2<f64>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FoldScore {
    pub subject_accuracy: f64,
    pub window_accuracy: f64,
    pub n_subjects: usize,
    pub n_windows: usize,
}

/// Scores a window-level probability model on test subjects.
pub fn evaluate_fold<F>(predict: F, subjects: &[SubjectFeatures]) -> Result<FoldScore>
where
    F: Fn(&Array2<f64>) -> Result<Array2<f64>>,
{
    if subjects.is_empty() {
        return Err(Error::Empty("no test subjects".into()));
    }
    let (mut correct_subjects, mut correct_windows, mut windows) = (0, 0, 0);
    for s in subjects {
        if s.windows.nrows() == 0 {
            return Err(Error::Empty(format!("subject {} has no windows", s.subject_id)));
        }
        let preds = argmax_rows(&predict(&s.windows)?);
        correct_windows += preds.iter().filter(|&&p| p == s.label).count();
        windows += preds.len();
        if majority_vote(&preds)? == s.label {
            correct_subjects += 1;
        }
    }
    Ok(FoldScore {
        subject_accuracy: correct_subjects as f64 / subjects.len() as f64,
        window_accuracy: correct_windows as f64 / windows as f64,
        n_subjects: subjects.len(),
        n_windows: windows,
    })
}
