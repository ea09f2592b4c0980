//! Binary classification metrics: F1-Macro, F1-Micro and seed aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{DalError, Result};

/// Binary confusion counts, with class 1 as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Counts seen from class `c`'s point of view: (tp, fp, fn).
    pub fn class_counts(&self, c: usize) -> (usize, usize, usize) {
        if c == 1 {
            (self.tp, self.fp, self.fn_)
        } else {
            (self.tn, self.fn_, self.fp)
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        (self.tp + self.tn) as f64 / self.total() as f64
    }
}

pub fn confusion(labels: &[usize], preds: &[usize]) -> Result<Confusion> {
    if labels.len() != preds.len() {
        return Err(DalError::Validation(format!(
            "{} labels but {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    if labels.is_empty() {
        return Err(DalError::Validation("no instances to score".into()));
    }
    let mut c = Confusion::default();
    for (&y, &p) in labels.iter().zip(preds) {
        if y > 1 {
            return Err(DalError::InvalidLabel(y));
        }
        if p > 1 {
            return Err(DalError::InvalidLabel(p));
        }
        match (y, p) {
            (1, 1) => c.tp += 1,
            (0, 1) => c.fp += 1,
            (1, 0) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// Argmax with ties going to class 0.
pub fn argmax2(probs: &[f64]) -> usize {
    usize::from(probs[1] > probs[0])
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if tp == 0 || denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

pub fn f1_macro(c: &Confusion) -> f64 {
    (0..2)
        .map(|k| {
            let (tp, fp, fn_) = c.class_counts(k);
            f1(tp, fp, fn_)
        })
        .sum::<f64>()
        / 2.0
}

/// F1 over the pooled counts of both classes; equals accuracy.
pub fn f1_micro(c: &Confusion) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for k in 0..2 {
        let (a, b, d) = c.class_counts(k);
        tp += a;
        fp += b;
        fn_ += d;
    }
    f1(tp, fp, fn_)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub f1_macro: f64,
    pub f1_micro: f64,
}

pub fn scores(labels: &[usize], preds: &[usize]) -> Result<Scores> {
    let c = confusion(labels, preds)?;
    Ok(Scores {
        f1_macro: f1_macro(&c),
        f1_micro: f1_micro(&c),
    })
}

/// Mean and sample standard deviation (n - 1 denominator, 0 for one run).
pub fn aggregate(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(DalError::Validation("cannot aggregate zero runs".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}
