//! Supervised contrastive loss over an augmented batch.
//!
//! For projections `z` with unit-norm rows and labels `y`,
//!
//! ```text
//! L = sum_i  -1/|P(i)|  sum_{p in P(i)}  log( exp(z_i.z_p / t) / sum_{n != i} exp(z_i.z_n / t) )
//! ```
//!
//! where `P(i)` holds every other row sharing `i`'s label and `t` is the
//! temperature. The sum is over anchors (not averaged).

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Two jittered views of each source sample.
///
/// Rows `0..b` are the first views, rows `b..2b` the second, so row `i` and
/// row `i + b` are siblings.
#[derive(Debug, Clone)]
pub struct AugmentedBatch {
    pub rows: DMatrix<f64>,
    pub view_of: Vec<usize>,
    pub labels: Vec<usize>,
}

impl AugmentedBatch {
    pub fn jittered<R: Rng>(source: &DMatrix<f64>, labels: &[usize], sigma: f64, rng: &mut R) -> Self {
        let b = source.nrows();
        let d = source.ncols();
        let mut rows = DMatrix::zeros(2 * b, d);
        for view in 0..2 {
            for i in 0..b {
                for j in 0..d {
                    let e: f64 = StandardNormal.sample(rng);
                    rows[(view * b + i, j)] = source[(i, j)] + sigma * e;
                }
            }
        }
        Self {
            rows,
            view_of: (0..2 * b).map(|r| r % b).collect(),
            labels: labels.iter().chain(labels).copied().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Loss value only.
pub fn supcon_loss(projections: &DMatrix<f64>, labels: &[usize], temperature: f64) -> Result<f64> {
    Ok(supcon_loss_and_grad(projections, labels, temperature)?.0)
}

/// Loss and its gradient w.r.t. each projection row.
///
/// Each anchor's log-sum-exp subtracts the anchor's largest logit before
/// exponentiating. Terms are accumulated in row order.
pub fn supcon_loss_and_grad(
    projections: &DMatrix<f64>,
    labels: &[usize],
    temperature: f64,
) -> Result<(f64, DMatrix<f64>)> {
    let n = projections.nrows();
    if labels.len() != n {
        return Err(Error::shape(format!("{n} labels"), labels.len()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let logits = projections * projections.transpose() / temperature;
    let mut coeff = DMatrix::<f64>::zeros(n, n);
    let mut loss = 0.0;
    for i in 0..n {
        let positives = (0..n).filter(|&p| p != i && labels[p] == labels[i]).count();
        if positives == 0 {
            return Err(Error::Contract(format!(
                "anchor row {i} (label {}) has no positive in the batch",
                labels[i]
            )));
        }
        let max = (0..n)
            .filter(|&j| j != i)
            .map(|j| logits[(i, j)])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n)
            .filter(|&j| j != i)
            .map(|j| (logits[(i, j)] - max).exp())
            .sum();
        let log_z = max + denom.ln();
        let inv_pos = 1.0 / positives as f64;
        let mut positive_mean = 0.0;
        for j in (0..n).filter(|&j| j != i) {
            let mut c = (logits[(i, j)] - max).exp() / denom;
            if labels[j] == labels[i] {
                positive_mean += logits[(i, j)] * inv_pos;
                c -= inv_pos;
            }
            coeff[(i, j)] = c;
        }
        loss += log_z - positive_mean;
    }
    // d logit_ij / d z_i = z_j / t and d logit_ij / d z_j = z_i / t
    let grad = (&coeff + coeff.transpose()) * projections / temperature;
    Ok((loss, grad))
}
