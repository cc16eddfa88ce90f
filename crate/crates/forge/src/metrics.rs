//! Evaluation metrics: the two-class confusion matrix with sensitivity /
//! specificity / F-value, and per-class intersection-over-union for masks.
//!
//! Naming convention: the minority (notary) class is the positive class.
//! `sensitivity` is the recall of the majority class, `specificity` the
//! recall of the minority class, and `f_value` the F1 of the minority class —
//! the convention implied by a degenerate all-majority predictor scoring
//! (1.0, 0.0, 0.0). Internally these are `majority_recall`,
//! `minority_recall`, and `minority_f1`; reports map them to the column
//! names above.

use crate::{Error, Result};

/// Counts of a two-class problem; `true` is the minority (notary) class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    /// predicted minority, is minority
    pub tp: u64,
    /// predicted minority, is majority
    pub fp: u64,
    /// predicted majority, is minority
    pub fn_: u64,
    /// predicted majority, is majority
    pub tn: u64,
}

impl Confusion {
    /// Merge counts (used to aggregate runs before computing rates).
    pub fn merge(&self, other: &Confusion) -> Confusion {
        Confusion {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }
}

/// Tally the four confusion cells. `true` marks the minority class.
pub fn binary_confusion(preds: &[bool], labels: &[bool]) -> Result<Confusion> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!(
            "binary_confusion: {} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &y) in preds.iter().zip(labels) {
        match (p, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Recall of the majority class: `tn / (tn + fp)`. 0/0 → 0.
pub fn sensitivity(c: &Confusion) -> f64 {
    ratio(c.tn, c.tn + c.fp)
}

/// Recall of the minority class: `tp / (tp + fn)`. 0/0 → 0.
pub fn specificity(c: &Confusion) -> f64 {
    ratio(c.tp, c.tp + c.fn_)
}

/// F1 of the minority class. 0/0 → 0.
pub fn f_value(c: &Confusion) -> f64 {
    let p = ratio(c.tp, c.tp + c.fp);
    let r = ratio(c.tp, c.tp + c.fn_);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Intersection over union of one class between two masks.
///
/// A class absent from both masks scores 1.0 here; [`mean_iou`] drops such
/// classes from the mean instead.
pub fn iou(pred: &[u8], gt: &[u8], class: u8) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "iou: {} vs {} pixels",
            pred.len(),
            gt.len()
        )));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&p, &g) in pred.iter().zip(gt) {
        let a = p == class;
        let b = g == class;
        if a && b {
            inter += 1;
        }
        if a || b {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Per-class IoU for classes `0..n_classes`, with `None` for classes absent
/// from both masks.
pub fn iou_per_class(pred: &[u8], gt: &[u8], n_classes: u8) -> Result<Vec<Option<f64>>> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "iou_per_class: {} vs {} pixels",
            pred.len(),
            gt.len()
        )));
    }
    let mut inter = vec![0u64; usize::from(n_classes)];
    let mut union = vec![0u64; usize::from(n_classes)];
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            if usize::from(p) < inter.len() {
                inter[usize::from(p)] += 1;
                union[usize::from(p)] += 1;
            }
        } else {
            if usize::from(p) < union.len() {
                union[usize::from(p)] += 1;
            }
            if usize::from(g) < union.len() {
                union[usize::from(g)] += 1;
            }
        }
    }
    Ok(inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| if u == 0 { None } else { Some(i as f64 / u as f64) })
        .collect())
}

/// Mean IoU over the classes present in at least one of the masks.
pub fn mean_iou(pred: &[u8], gt: &[u8], n_classes: u8) -> Result<f64> {
    let per = iou_per_class(pred, gt, n_classes)?;
    let present: Vec<f64> = per.into_iter().flatten().collect();
    if present.is_empty() {
        return Err(Error::Validation("mean_iou: no class present in either mask".into()));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}
