use nalgebra::{DMatrix, DVector};

use crate::datasets::FeatureMatrix;
use crate::error::{Error, Result};
use crate::pca::ClassPcaModel;

const STOCHASTIC_TOLERANCE: f64 = 1e-4;

fn check_stochastic(probs: &DMatrix<f64>) -> Result<()> {
    for (i, row) in probs.row_iter().enumerate() {
        let sum = row.sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOLERANCE || row.iter().any(|&p| p < -1e-12 || !p.is_finite()) {
            return Err(Error::Contract(format!("probability row {i} is not stochastic (sum {sum})")));
        }
    }
    Ok(())
}

/// Shannon entropy in nats; `0 ln 0 = 0`.
pub fn entropy<'a>(p: impl IntoIterator<Item = &'a f64>) -> f64 {
    -p.into_iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Predictive entropy of each row.
pub fn score_entropy(probs: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_stochastic(probs)?;
    Ok(probs.row_iter().map(|r| entropy(r.iter())).collect())
}

/// Mutual information between prediction and model draw:
/// `H[mean_t p_t] - mean_t H[p_t]`, clamped at 0.
pub fn score_bald(slices: &[DMatrix<f64>]) -> Result<Vec<f64>> {
    if slices.len() < 2 {
        return Err(Error::Usage(format!("BALD needs at least 2 stochastic passes, got {}", slices.len())));
    }
    let shape = slices[0].shape();
    if let Some(bad) = slices.iter().find(|s| s.shape() != shape) {
        return Err(Error::shape(format!("{shape:?}"), format!("{:?}", bad.shape())));
    }
    for s in slices {
        check_stochastic(s)?;
    }
    let tau = slices.len() as f64;
    let mut mean = DMatrix::zeros(shape.0, shape.1);
    let mut mean_entropy = vec![0.0; shape.0];
    for s in slices {
        mean += s;
        for (i, row) in s.row_iter().enumerate() {
            mean_entropy[i] += entropy(row.iter()) / tau;
        }
    }
    mean /= tau;
    Ok(mean
        .row_iter()
        .zip(mean_entropy)
        .map(|(row, me)| (entropy(row.iter()) - me).max(0.0))
        .collect())
}

/// Unit-normalized labeled features grouped by true class.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    by_class: Vec<DMatrix<f64>>,
    all: DMatrix<f64>,
    /// Normalize the query as well (cosine similarity) instead of the
    /// norm-weighted form.
    pub symmetric: bool,
}

impl FeatureBank {
    pub fn new(labeled: &FeatureMatrix, classes: usize) -> Result<Self> {
        let labels = labeled.require_labels()?;
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::Usage(format!("label {y} outside [0, {classes})")));
            }
            let norm = labeled.row(i).iter().map(|v| v * v).sum::<f64>();
            if norm > 0.0 {
                rows[y].push(i);
            }
        }
        let unit = |idx: &[usize]| {
            let mut m = labeled.select(idx).to_dmatrix();
            for mut r in m.row_iter_mut() {
                let n = r.norm();
                r /= n;
            }
            m
        };
        let all_rows: Vec<usize> = rows.concat();
        Ok(Self {
            by_class: rows.iter().map(|r| unit(r)).collect(),
            all: unit(&all_rows),
            symmetric: false,
        })
    }

    pub fn classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn class_size(&self, k: usize) -> usize {
        self.by_class.get(k).map_or(0, DMatrix::nrows)
    }

    fn reference(&self, k: usize) -> Result<&DMatrix<f64>> {
        match self.by_class.get(k) {
            Some(m) if m.nrows() > 0 => Ok(m),
            _ if self.all.nrows() > 0 => {
                log::debug!("no labeled features for class {k}; scoring against the whole labeled pool");
                Ok(&self.all)
            }
            _ => Err(Error::Scoring("feature bank holds no labeled features".into())),
        }
    }
}

/// Largest dot product between the query and the unit-normalized labeled
/// features of class `k`. The query keeps its norm unless the bank is
/// symmetric.
pub fn score_featuresim(z: &[f64], k: usize, bank: &FeatureBank) -> Result<f64> {
    let reference = bank.reference(k)?;
    if z.len() != reference.ncols() {
        return Err(Error::shape(format!("feature dimension {}", reference.ncols()), z.len()));
    }
    let q = DVector::from_column_slice(z);
    let best = (reference * &q).max();
    if bank.symmetric {
        let norm = q.norm();
        return Ok(if norm > 0.0 { best / norm } else { 0.0 });
    }
    Ok(best)
}

/// Reconstruction error under the predicted class's PCA transform.
pub fn score_fre(z: &[f64], k: usize, pca: &ClassPcaModel) -> Result<f64> {
    pca.fre_score(z, k)
}
