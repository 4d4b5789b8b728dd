use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub acc: f64,
    pub bacc: f64,
    pub wf1: f64,
}

/// Accuracy, balanced accuracy (mean recall over classes present in
/// `y_true`) and support-weighted F1 over class indices `0..n_classes`.
pub fn metrics(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<Metrics> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape(format!(
            "{} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::Protocol("metrics need at least one sample".into()));
    }
    if let Some(&c) = y_true.iter().chain(y_pred).find(|&&c| c >= n_classes) {
        return Err(Error::Param(format!("class index {c} outside 0..{n_classes}")));
    }
    let mut tp = vec![0usize; n_classes];
    let mut support = vec![0usize; n_classes];
    let mut predicted = vec![0usize; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        support[t] += 1;
        predicted[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    let n = y_true.len() as f64;
    let acc = tp.iter().sum::<usize>() as f64 / n;
    let present: Vec<usize> = (0..n_classes).filter(|&c| support[c] > 0).collect();
    let bacc = present.iter().map(|&c| tp[c] as f64 / support[c] as f64).sum::<f64>() / present.len() as f64;
    let wf1 = present
        .iter()
        .map(|&c| {
            let recall = tp[c] as f64 / support[c] as f64;
            let precision = if predicted[c] > 0 {
                tp[c] as f64 / predicted[c] as f64
            } else {
                0.0
            };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            support[c] as f64 * f1
        })
        .sum::<f64>()
        / n;
    Ok(Metrics { acc, bacc, wf1 })
}
