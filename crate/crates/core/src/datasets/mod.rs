//! Feature data: the [`FeatureMatrix`] container, synthetic generators,
//! parametric distribution shifts and on-disk formats.

mod io;
pub(crate) mod io_support {
    pub(crate) use super::io::LeReader;
}
mod shift;
mod synthetic;

use std::collections::HashSet;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub use io::{load_features, save_features, FeatureFormat};
pub use shift::{apply_shift, ShiftKind, ShiftSpec};
pub use synthetic::{class_sizes, generate_mixture, generate_ood, DatasetSpec};

/// Dense row-major matrix of `n` feature vectors of dimension `d`, with a
/// unique string id per row and optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    d: usize,
    values: Vec<f64>,
    ids: Vec<String>,
    labels: Option<Vec<usize>>,
}

impl FeatureMatrix {
    pub fn new(
        d: usize,
        values: Vec<f64>,
        ids: Vec<String>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let n = ids.len();
        if values.len() != n * d {
            return Err(Error::shape(
                format!("{} values for {n}x{d}", n * d),
                values.len(),
            ));
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::shape(format!("{n} labels"), labels.len()));
            }
        }
        if let Some(row) = (0..n).find(|&i| values[i * d..(i + 1) * d].iter().any(|v| !v.is_finite())) {
            return Err(Error::Ingestion {
                row,
                message: "non-finite feature value".into(),
            });
        }
        let mut seen = HashSet::with_capacity(n);
        if let Some(row) = ids.iter().position(|id| !seen.insert(id.as_str())) {
            return Err(Error::Ingestion {
                row,
                message: format!("duplicate id {:?}", ids[row]),
            });
        }
        Ok(Self { d, values, ids, labels })
    }

    /// Rows with generated ids `s000000, s000001, ...`.
    pub fn with_generated_ids(d: usize, values: Vec<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        let n = if d == 0 { labels.as_ref().map_or(0, Vec::len) } else { values.len() / d };
        Self::new(d, values, generated_ids(n), labels)
    }

    pub fn empty(d: usize) -> Self {
        Self {
            d,
            values: Vec::new(),
            ids: Vec::new(),
            labels: None,
        }
    }

    /// Rebuild from a nalgebra matrix holding one sample per row.
    pub fn from_dmatrix(m: &DMatrix<f64>, ids: Vec<String>, labels: Option<Vec<usize>>) -> Result<Self> {
        let mut values = Vec::with_capacity(m.len());
        for row in m.row_iter() {
            values.extend(row.iter());
        }
        Self::new(m.ncols(), values, ids, labels)
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.n()).map(move |i| self.row(i))
    }

    /// Labels, or a usage error when the matrix is unlabeled.
    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels()
            .ok_or_else(|| Error::Usage("feature matrix carries no labels".into()))
    }

    /// Number of classes implied by the labels (`max + 1`), 0 when unlabeled.
    pub fn label_cardinality(&self) -> usize {
        self.labels()
            .and_then(|l| l.iter().max())
            .map_or(0, |m| m + 1)
    }

    /// Per-class histogram over `k` classes.
    pub fn class_counts(&self, k: usize) -> Result<Vec<usize>> {
        let labels = self.require_labels()?;
        let mut counts = vec![0; k];
        for (row, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::Ingestion {
                    row,
                    message: format!("label {y} outside [0, {k})"),
                });
            }
            counts[y] += 1;
        }
        Ok(counts)
    }

    /// Copy of the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut values = Vec::with_capacity(rows.len() * self.d);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        Self {
            d: self.d,
            values,
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| rows.iter().map(|&r| l[r]).collect()),
        }
    }

    /// Rows of `self` followed by rows of `other`. Both must agree on width
    /// and on whether they carry labels.
    pub fn concat(&self, other: &FeatureMatrix) -> Result<Self> {
        if self.d != other.d {
            return Err(Error::shape(format!("feature dimension {}", self.d), other.d));
        }
        let labels = match (&self.labels, &other.labels) {
            (Some(a), Some(b)) => Some([a.as_slice(), b.as_slice()].concat()),
            (None, None) => None,
            _ => return Err(Error::Usage("cannot concatenate labeled and unlabeled rows".into())),
        };
        Self::new(
            self.d,
            [self.values.as_slice(), other.values.as_slice()].concat(),
            [self.ids.as_slice(), other.ids.as_slice()].concat(),
            labels,
        )
    }

    /// Same ids and labels with replaced feature values (possibly a new width).
    pub fn with_values(&self, d: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(d, values, self.ids.clone(), self.labels.clone())
    }

    pub fn with_labels(mut self, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != self.n() {
                return Err(Error::shape(format!("{} labels", self.n()), l.len()));
            }
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n(), self.d, &self.values)
    }

    /// Rows `start..end` as a nalgebra matrix.
    pub fn block(&self, start: usize, end: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(end - start, self.d, &self.values[start * self.d..end * self.d])
    }
}

pub(crate) fn generated_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("s{i:06}")).collect()
}
