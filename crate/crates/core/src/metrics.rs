//! Evaluation metrics and the per-iteration report record.
//!
//! Natural logarithms throughout.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::datasets::ShiftKind;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, ModelState};

fn check_pairs(probs: &DMatrix<f64>, labels: &[usize]) -> Result<()> {
    if probs.nrows() != labels.len() {
        return Err(Error::shape(format!("{} labels", probs.nrows()), labels.len()));
    }
    if probs.nrows() == 0 {
        return Err(Error::Metric("no samples".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= probs.ncols()) {
        return Err(Error::Metric(format!("label {y} outside [0, {})", probs.ncols())));
    }
    Ok(())
}

pub fn accuracy(probs: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    check_pairs(probs, labels)?;
    let correct = argmax_rows(probs).iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Expected calibration error over equal-width bins of the top-class
/// confidence: `sum_b (n_b / n) |acc_b - conf_b|`.
pub fn ece(probs: &DMatrix<f64>, labels: &[usize], bins: usize) -> Result<f64> {
    check_pairs(probs, labels)?;
    if bins == 0 {
        return Err(Error::Config("ECE needs at least one bin".into()));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    let predicted = argmax_rows(probs);
    for (i, &y) in labels.iter().enumerate() {
        let conf = probs[(i, predicted[i])];
        let b = ((conf * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += conf;
        correct[b] += usize::from(predicted[i] == y);
    }
    let n = labels.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (correct[b] as f64 / nb - conf_sum[b] / nb).abs()
        })
        .sum())
}

/// Mean over samples of `sum_k (p_k - 1[y = k])^2`.
pub fn brier(probs: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    check_pairs(probs, labels)?;
    let total: f64 = probs
        .row_iter()
        .zip(labels)
        .map(|(row, &y)| {
            row.iter()
                .enumerate()
                .map(|(k, &p)| (p - f64::from(u8::from(k == y))).powi(2))
                .sum::<f64>()
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Mean negative log-likelihood with probabilities clamped below at 1e-12.
pub fn nll(probs: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    check_pairs(probs, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[(i, y)].max(1e-12).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Probability that a random out-of-distribution score exceeds a random
/// in-distribution score, ties counting one half (Mann-Whitney U with
/// midranks).
pub fn auroc(scores_in: &[f64], scores_out: &[f64]) -> Result<f64> {
    if scores_in.is_empty() || scores_out.is_empty() {
        return Err(Error::Metric("AUROC needs non-empty in and out score sets".into()));
    }
    if scores_in.iter().chain(scores_out).any(|s| s.is_nan()) {
        return Err(Error::Metric("AUROC scores contain NaN".into()));
    }
    let mut all: Vec<(f64, bool)> = scores_in
        .iter()
        .map(|&s| (s, false))
        .chain(scores_out.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_out = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks are 1-based; tied block i..=j shares the midrank
        let midrank = (i + j + 2) as f64 / 2.0;
        rank_sum_out += midrank * all[i..=j].iter().filter(|(_, out)| *out).count() as f64;
        i = j + 1;
    }
    let n_out = scores_out.len() as f64;
    let n_in = scores_in.len() as f64;
    let u = rank_sum_out - n_out * (n_out + 1.0) / 2.0;
    Ok(u / (n_in * n_out))
}

/// `1 - H(acquired class distribution) / ln K`, with `K = counts.len()`.
pub fn sampling_bias(class_counts: &[usize]) -> Result<f64> {
    let k = class_counts.len();
    if k < 2 {
        return Err(Error::Metric(format!("sampling bias needs at least 2 classes, got {k}")));
    }
    let m: usize = class_counts.iter().sum();
    if m == 0 {
        return Err(Error::Metric("sampling bias of an empty acquisition".into()));
    }
    let h: f64 = class_counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / m as f64;
            -p * p.ln()
        })
        .sum();
    Ok((1.0 - h / (k as f64).ln()).clamp(0.0, 1.0))
}

/// Unnormalized mean classification error over shift cells.
pub fn mce(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Metric("mCE over zero shift cells".into()));
    }
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

/// Encoder passes and wall time spent in one scoring phase.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QueryCost {
    pub forward_passes: u64,
    pub wall_ms: f64,
}

/// Run `scoring` and charge it the model's forward passes and wall time.
pub fn query_cost<T>(model: &ModelState, scoring: impl FnOnce() -> T) -> (T, QueryCost) {
    let before = model.forward_pass_count();
    let start = Instant::now();
    let out = scoring();
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    (
        out,
        QueryCost {
            forward_passes: model.forward_pass_count() - before,
            wall_ms,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftResult {
    pub kind: ShiftKind,
    pub intensity: u8,
    pub accuracy: f64,
    pub ece: f64,
}

/// One active-learning iteration, serialized as one JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub strategy: String,
    pub seed: u64,
    pub iteration: usize,
    pub labeled_count: usize,
    pub accuracy: f64,
    pub ece: f64,
    pub nll: f64,
    pub brier: f64,
    pub sampling_bias: f64,
    pub auroc_ood: Option<f64>,
    pub mce: Option<f64>,
    pub mce_normalization: String,
    pub per_shift: Vec<ShiftResult>,
    /// Absent unless wall-clock recording is enabled, so reports stay
    /// byte-identical across reruns by default.
    pub query_wall_ms: Option<f64>,
    pub forward_passes_used: u64,
    /// True class histogram of the labeled set.
    pub class_counts: Vec<usize>,
    pub acquired: usize,
    /// Predicted-class histogram of this iteration's acquisitions, for
    /// strategies that rank by predicted class.
    pub acquired_predicted: Option<Vec<usize>>,
    /// Slots filled from the global ranking after per-class quotas ran dry.
    pub refilled: usize,
    pub truncated: bool,
    pub train_loss: Option<f64>,
}

impl IterationReport {
    /// Value of a numeric metric by its field name.
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "accuracy" => Some(self.accuracy),
            "ece" => Some(self.ece),
            "nll" => Some(self.nll),
            "brier" => Some(self.brier),
            "sampling_bias" => Some(self.sampling_bias),
            "auroc_ood" => self.auroc_ood,
            "mce" => self.mce,
            "labeled_count" => Some(self.labeled_count as f64),
            "forward_passes_used" => Some(self.forward_passes_used as f64),
            "query_wall_ms" => self.query_wall_ms,
            "shift_ece" => mean_of(self.per_shift.iter().map(|s| s.ece)),
            "shift_error" => mean_of(self.per_shift.iter().map(|s| 1.0 - s.accuracy)),
            _ => None,
        }
    }

    pub const METRICS: [&'static str; 10] = [
        "accuracy",
        "ece",
        "nll",
        "brier",
        "sampling_bias",
        "auroc_ood",
        "mce",
        "shift_ece",
        "shift_error",
        "forward_passes_used",
    ];

    /// Range checks on every bounded field.
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Contract(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("accuracy", self.accuracy)?;
        unit("ece", self.ece)?;
        unit("sampling_bias", self.sampling_bias)?;
        if let Some(a) = self.auroc_ood {
            unit("auroc_ood", a)?;
        }
        for (name, v) in [("nll", self.nll), ("brier", self.brier), ("mce", self.mce.unwrap_or(0.0))] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Contract(format!("{name} = {v} is not a finite non-negative number")));
            }
        }
        Ok(())
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows.len(), rows[0].len(), &rows.concat())
    }

    #[test]
    fn ece_fixed_points() {
        let onehot = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(ece(&onehot, &[0, 1], 15).unwrap(), 0.0);
        let confident = m(&[&[0.8, 0.2], &[0.2, 0.8]]);
        assert!((ece(&confident, &[0, 1], 15).unwrap() - 0.2).abs() < 1e-12);
        // uniform over 4 classes, argmax picks class 0, one label in four is 0
        let uniform = DMatrix::from_element(8, 4, 0.25);
        assert!(ece(&uniform, &[0, 1, 2, 3, 0, 1, 2, 3], 15).unwrap() < 1e-12);
        assert!(ece(&DMatrix::zeros(0, 2), &[], 15).is_err());
    }

    #[test]
    fn brier_fixed_points() {
        assert_eq!(brier(&m(&[&[1.0, 0.0]]), &[0]).unwrap(), 0.0);
        assert!((brier(&m(&[&[0.5, 0.5]]), &[0]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(brier(&m(&[&[1.0, 0.0]]), &[1]).unwrap(), 2.0);
    }

    #[test]
    fn nll_fixed_points() {
        assert_eq!(nll(&m(&[&[1.0, 0.0]]), &[0]).unwrap(), 0.0);
        let e = std::f64::consts::E;
        assert!((nll(&m(&[&[1.0 / e, 1.0 - 1.0 / e]]), &[0]).unwrap() - 1.0).abs() < 1e-12);
        let mixed = m(&[&[1.0, 0.0], &[1.0 / e, 1.0 - 1.0 / e], &[0.0, 1.0]]);
        // (0 + 1 + -ln 1e-12) / 3
        let want = (0.0 + 1.0 + 12.0 * 10f64.ln()) / 3.0;
        assert!((nll(&mixed, &[0, 0, 0]).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn auroc_fixed_points() {
        assert_eq!(auroc(&[0.1, 0.2], &[0.9, 0.8]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5, 0.1], &[0.8, 0.3]).unwrap(), 0.75);
        assert_eq!(auroc(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap(), 0.5);
        assert!(auroc(&[], &[1.0]).is_err());
    }

    #[test]
    fn sampling_bias_fixed_points() {
        assert!(sampling_bias(&[5, 5, 5]).unwrap() < 1e-12);
        assert_eq!(sampling_bias(&[0, 7, 0]).unwrap(), 1.0);
        let h = -(0.75 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        let b = sampling_bias(&[3, 1]).unwrap();
        assert!((b - (1.0 - h / 2f64.ln())).abs() < 1e-15);
        assert!((b - 0.1887).abs() < 1e-4);
        assert!(sampling_bias(&[0, 0]).is_err());
    }

    #[test]
    fn mce_fixed_points() {
        assert_eq!(mce(&[0.0, 0.0]).unwrap(), 0.0);
        assert!((mce(&[0.3; 4]).unwrap() - 0.3).abs() < 1e-15);
        assert!((mce(&[0.1, 0.3]).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn brier_is_proper_on_a_grid() {
        // true label distribution q over 3 classes; expected Brier of a
        // constant forecast p is sum_y q_y * brier(p, y)
        let q = [0.5, 0.3, 0.2];
        let expected = |p: &[f64]| -> f64 {
            (0..3)
                .map(|y| q[y] * brier(&DMatrix::from_row_slice(1, 3, p), &[y]).unwrap())
                .sum()
        };
        let truth = expected(&q);
        for a in 0..=10 {
            for b in 0..=(10 - a) {
                let p = [a as f64 / 10.0, b as f64 / 10.0, (10 - a - b) as f64 / 10.0];
                if p.iter().zip(&q).any(|(x, y)| (x - y).abs() > 1e-9) {
                    assert!(expected(&p) > truth);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn auroc_is_antisymmetric(a in prop::collection::vec(-1e3f64..1e3, 1..30), b in prop::collection::vec(-1e3f64..1e3, 1..30)) {
            prop_assume!(a.iter().all(|x| !b.contains(x)));
            prop_assert!((auroc(&a, &b).unwrap() + auroc(&b, &a).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn bias_ignores_class_order(mut counts in prop::collection::vec(0usize..50, 2..10)) {
            prop_assume!(counts.iter().sum::<usize>() > 0);
            let before = sampling_bias(&counts).unwrap();
            counts.reverse();
            prop_assert!((sampling_bias(&counts).unwrap() - before).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&before));
        }

        #[test]
        fn ece_ignores_sample_order(rows in prop::collection::vec((0.0f64..1.0, 0usize..2), 1..40)) {
            let probs: Vec<f64> = rows.iter().flat_map(|&(p, _)| [p, 1.0 - p]).collect();
            let labels: Vec<usize> = rows.iter().map(|&(_, y)| y).collect();
            let fwd = ece(&DMatrix::from_row_slice(rows.len(), 2, &probs), &labels, 15).unwrap();
            let rp: Vec<f64> = rows.iter().rev().flat_map(|&(p, _)| [p, 1.0 - p]).collect();
            let rl: Vec<usize> = labels.iter().rev().copied().collect();
            let rev = ece(&DMatrix::from_row_slice(rows.len(), 2, &rp), &rl, 15).unwrap();
            prop_assert!((fwd - rev).abs() < 1e-12);
        }
    }
}
