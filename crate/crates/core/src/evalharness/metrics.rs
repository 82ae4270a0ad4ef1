use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
}

/// Accuracy, macro-F1 (classes with no support and no predictions count as
/// F1 = 0) and micro-F1 from pooled counts.
pub fn classification_metrics(preds: &[usize], golds: &[usize], num_classes: usize) -> Result<ClassificationMetrics> {
    if preds.is_empty() {
        return Err(Error::Contract("no predictions to score".into()));
    }
    if preds.len() != golds.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    if let Some(&c) = preds.iter().chain(golds).find(|&&c| c >= num_classes) {
        return Err(Error::Task(format!("class {c} outside 0..{num_classes}")));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&p, &g) in preds.iter().zip(golds) {
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let f1 = |tp: usize, fp: usize, fn_: usize| {
        let d = 2 * tp + fp + fn_;
        if d == 0 {
            0.0
        } else {
            2.0 * tp as f64 / d as f64
        }
    };
    let macro_f1 = (0..num_classes).map(|c| f1(tp[c], fp[c], fn_[c])).sum::<f64>() / num_classes as f64;
    let (ttp, tfp, tfn) = (tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    Ok(ClassificationMetrics {
        accuracy: ttp as f64 / preds.len() as f64,
        macro_f1,
        micro_f1: f1(ttp, tfp, tfn),
    })
}
