//! Class-conditional PCA and the feature-reconstruction-error score.
//!
//! For each class `k` the model stores the class mean `mu_k`, an orthonormal
//! basis `U_k` of the leading principal directions and their eigenvalues
//! (sample covariance, `1/(n-1)` normalization). The reconstruction error of
//! a feature `z` is `|| (z - mu_k) - U_k U_k^T (z - mu_k) ||`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::checkpoint::Container;
use crate::datasets::FeatureMatrix;
use crate::error::{Error, Result};
use crate::flatconf::FlatConfig;

/// How many principal directions to keep per class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ComponentTarget {
    Fixed(usize),
    /// Smallest prefix whose eigenvalue sum reaches this fraction of the
    /// total variance.
    Variance(f64),
}

impl Default for ComponentTarget {
    fn default() -> Self {
        ComponentTarget::Variance(0.95)
    }
}

/// Which eigenproblem to solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EigenPath {
    /// Scatter when `n > D`, Gram otherwise.
    #[default]
    Auto,
    /// `D x D` covariance.
    Scatter,
    /// `n x n` Gram matrix of the centered samples (snapshot method).
    Gram,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcaOptions {
    pub target: ComponentTarget,
    pub center: bool,
    pub path: EigenPath,
}

impl Default for PcaOptions {
    fn default() -> Self {
        Self {
            target: ComponentTarget::default(),
            center: true,
            path: EigenPath::Auto,
        }
    }
}

/// Eigenvalues below this fraction of the largest one are treated as zero
/// and their directions are not retained.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPca {
    pub mean: DVector<f64>,
    /// `D x L` with orthonormal columns.
    pub basis: DMatrix<f64>,
    /// Retained eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Trace of the sample covariance.
    pub total_variance: f64,
    pub fit_count: usize,
}

impl ClassPca {
    pub fn components(&self) -> usize {
        self.basis.ncols()
    }

    pub fn discarded_variance(&self) -> f64 {
        (self.total_variance - self.eigenvalues.iter().sum::<f64>()).max(0.0)
    }

    pub fn reconstruction_error(&self, z: &[f64]) -> f64 {
        let centered = DVector::from_column_slice(z) - &self.mean;
        let coeffs = self.basis.tr_mul(&centered);
        (centered - &self.basis * coeffs).norm()
    }

    /// Fit one class from its samples (one per row).
    pub fn fit(samples: &DMatrix<f64>, options: &PcaOptions) -> Self {
        let (n, d) = samples.shape();
        let mean = if options.center && n > 0 {
            DVector::from_iterator(d, samples.column_iter().map(|c| c.sum() / n as f64))
        } else {
            DVector::zeros(d)
        };
        if n < 2 {
            return Self {
                mean,
                basis: DMatrix::zeros(d, 0),
                eigenvalues: Vec::new(),
                total_variance: 0.0,
                fit_count: n,
            };
        }
        let mut centered = samples.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let denom = (n - 1) as f64;
        let total_variance = centered.norm_squared() / denom;
        let use_gram = match options.path {
            EigenPath::Auto => n <= d,
            EigenPath::Scatter => false,
            EigenPath::Gram => true,
        };
        let (eigenvalues, vectors) = if use_gram {
            gram_eigen(&centered, denom)
        } else {
            sorted_eigen(centered.tr_mul(&centered) / denom)
        };
        let largest = eigenvalues.first().copied().unwrap_or(0.0);
        let rank = eigenvalues
            .iter()
            .take_while(|&&l| l > RANK_TOLERANCE * largest && l > 0.0)
            .count()
            .min(n - 1)
            .min(d);
        let keep = match options.target {
            ComponentTarget::Fixed(l) => l.min(rank),
            ComponentTarget::Variance(v) => {
                let goal = v * total_variance;
                let mut acc = 0.0;
                let mut m = 0;
                while m < rank && acc < goal {
                    acc += eigenvalues[m];
                    m += 1;
                }
                m
            }
        };
        Self {
            mean,
            basis: vectors.columns(0, keep).into_owned(),
            eigenvalues: eigenvalues[..keep].to_vec(),
            total_variance,
            fit_count: n,
        }
    }
}

/// Eigenpairs of a symmetric matrix, eigenvalues descending and clamped at 0.
fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vectors = DMatrix::from_columns(&order.iter().map(|&i| eig.eigenvectors.column(i)).collect::<Vec<_>>());
    (values, vectors)
}

/// Principal directions from the `n x n` Gram matrix: for an eigenpair
/// `(l, v)` of `X X^T/(n-1)`, `X^T v / sqrt((n-1) l)` is a unit eigenvector
/// of the covariance with the same eigenvalue.
fn gram_eigen(centered: &DMatrix<f64>, denom: f64) -> (Vec<f64>, DMatrix<f64>) {
    let d = centered.ncols();
    let (values, small) = sorted_eigen(centered * centered.transpose() / denom);
    let largest = values.first().copied().unwrap_or(0.0);
    let mut columns: Vec<DVector<f64>> = Vec::new();
    for (i, &l) in values.iter().enumerate() {
        if !(l > RANK_TOLERANCE * largest && l > 0.0) || columns.len() == d {
            break;
        }
        let mut u = centered.tr_mul(&small.column(i)) / (denom * l).sqrt();
        // Re-orthogonalize against earlier columns; only rounding is removed.
        for prev in &columns {
            let proj = prev.dot(&u);
            u -= prev * proj;
        }
        let norm = u.norm();
        columns.push(u / norm);
    }
    let basis = if columns.is_empty() {
        DMatrix::zeros(d, 0)
    } else {
        DMatrix::from_columns(&columns)
    };
    (values[..columns.len()].to_vec(), basis)
}

/// Per-class PCA models indexed by class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPcaModel {
    dim: usize,
    center: bool,
    classes: Vec<Option<ClassPca>>,
}

impl ClassPcaModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class(&self, k: usize) -> Option<&ClassPca> {
        self.classes.get(k).and_then(Option::as_ref)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Reconstruction error of `z` under class `k`'s transform.
    pub fn fre_score(&self, z: &[f64], k: usize) -> Result<f64> {
        if z.len() != self.dim {
            return Err(Error::shape(format!("feature dimension {}", self.dim), z.len()));
        }
        let class = self
            .class(k)
            .ok_or_else(|| Error::Scoring(format!("class {k} has no fitted PCA transform")))?;
        Ok(class.reconstruction_error(z))
    }

    pub fn to_container(&self) -> Container {
        let mut meta = FlatConfig::new();
        meta.set("pca.dim", self.dim);
        meta.set("pca.classes", self.classes.len());
        meta.set("pca.center", self.center);
        let mut c = Container::new(meta);
        for (k, class) in self.classes.iter().enumerate() {
            let Some(class) = class else { continue };
            c.push(format!("pca.{k}.mean"), DMatrix::from_row_slice(1, self.dim, class.mean.as_slice()));
            c.push(format!("pca.{k}.basis"), class.basis.clone());
            c.push(
                format!("pca.{k}.eigenvalues"),
                DMatrix::from_row_slice(1, class.eigenvalues.len(), &class.eigenvalues),
            );
            c.push(
                format!("pca.{k}.stats"),
                DMatrix::from_row_slice(1, 2, &[class.fit_count as f64, class.total_variance]),
            );
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let missing = |k: &str| Error::Usage(format!("checkpoint lacks {k}"));
        let dim = c.meta.get::<usize>("pca.dim")?.ok_or_else(|| missing("pca.dim"))?;
        let n_classes = c.meta.get::<usize>("pca.classes")?.ok_or_else(|| missing("pca.classes"))?;
        let center = c.meta.get_or("pca.center", true)?;
        let mut classes = Vec::with_capacity(n_classes);
        for k in 0..n_classes {
            if !c.has_tensor(&format!("pca.{k}.mean")) {
                classes.push(None);
                continue;
            }
            let mean = c.tensor(&format!("pca.{k}.mean"))?;
            let basis = c.tensor(&format!("pca.{k}.basis"))?;
            let eigen = c.tensor(&format!("pca.{k}.eigenvalues"))?;
            let stats = c.tensor(&format!("pca.{k}.stats"))?;
            if mean.len() != dim || basis.nrows() != dim || eigen.len() != basis.ncols() || stats.len() != 2 {
                return Err(Error::Usage(format!("checkpoint PCA tensors for class {k} are inconsistent")));
            }
            classes.push(Some(ClassPca {
                mean: DVector::from_row_slice(mean.as_slice()),
                basis: basis.clone(),
                eigenvalues: eigen.as_slice().to_vec(),
                fit_count: stats[0] as usize,
                total_variance: stats[1],
            }));
        }
        Ok(Self { dim, center, classes })
    }
}

/// Fit one transform per class from labeled features.
///
/// Classes with no samples stay unfitted; classes with a single sample get a
/// mean-only model (no retained directions) and a warning.
pub fn fit_class_pca(features: &FeatureMatrix, classes: usize, options: &PcaOptions) -> Result<ClassPcaModel> {
    let labels = features.require_labels()?;
    if let ComponentTarget::Variance(v) = options.target {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config(format!("variance fraction must be in [0, 1], got {v}")));
        }
    }
    let counts = features.class_counts(classes)?;
    let mut fitted = Vec::with_capacity(classes);
    for (k, &count) in counts.iter().enumerate() {
        if count == 0 {
            fitted.push(None);
            continue;
        }
        if count < 2 {
            log::warn!("class {k} has {count} labeled feature(s); using a mean-only PCA model");
        }
        let rows: Vec<usize> = (0..features.n()).filter(|&i| labels[i] == k).collect();
        let samples = features.select(&rows).to_dmatrix();
        fitted.push(Some(ClassPca::fit(&samples, options)));
    }
    Ok(ClassPcaModel {
        dim: features.d(),
        center: options.center,
        classes: fitted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labeled(d: usize, rows: &[Vec<f64>], labels: Vec<usize>) -> FeatureMatrix {
        FeatureMatrix::with_generated_ids(d, rows.concat(), Some(labels)).unwrap()
    }

    fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = crate::rng::stream(seed, 0);
        (0..n)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    #[test]
    fn three_collinear_points() {
        let data = labeled(2, &[vec![0.0, 0.0], vec![1.0, 0.0], vec![2.0, 0.0]], vec![0, 0, 0]);
        let opts = PcaOptions { target: ComponentTarget::Fixed(1), ..PcaOptions::default() };
        let model = fit_class_pca(&data, 1, &opts).unwrap();
        let c = model.class(0).unwrap();
        assert_eq!(c.mean.as_slice(), &[1.0, 0.0]);
        assert!((c.eigenvalues[0] - 1.0).abs() < 1e-12);
        assert!((c.basis[(0, 0)].abs() - 1.0).abs() < 1e-12);
        assert!(c.basis[(1, 0)].abs() < 1e-12);
    }

    #[test]
    fn plane_in_five_dimensions_reconstructs_exactly() {
        // points a*e1 + b*e3 + offset
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                let (a, b) = ((i as f64 * 0.7).sin() * 3.0, (i as f64 * 1.3).cos() * 2.0);
                vec![1.0, a + 1.0, 2.0, b, -1.0]
            })
            .collect();
        let data = labeled(5, &rows, vec![0; 12]);
        let opts = PcaOptions { target: ComponentTarget::Fixed(2), ..PcaOptions::default() };
        let model = fit_class_pca(&data, 1, &opts).unwrap();
        for r in &rows {
            assert!(model.fre_score(r, 0).unwrap() < 1e-10);
        }
    }

    #[test]
    fn orthogonal_offset_scores_its_length() {
        let rows = random_rows(30, 4, 1);
        let data = labeled(4, &rows, vec![0; 30]);
        let opts = PcaOptions { target: ComponentTarget::Fixed(2), ..PcaOptions::default() };
        let model = fit_class_pca(&data, 1, &opts).unwrap();
        let c = model.class(0).unwrap();
        // unit vector orthogonal to both basis columns
        let mut v = DVector::from_vec(vec![0.3, -0.2, 0.9, 0.1]);
        v -= &c.basis * c.basis.tr_mul(&v);
        v /= v.norm();
        let z = &c.mean + v * 2.0;
        assert!((model.fre_score(z.as_slice(), 0).unwrap() - 2.0).abs() < 1e-12);
        assert!(model.fre_score(c.mean.as_slice(), 0).unwrap() < 1e-15);
        let inside = &c.mean + &c.basis * DVector::from_vec(vec![5.0, -3.0]);
        assert!(model.fre_score(inside.as_slice(), 0).unwrap() < 1e-12);
    }

    #[test]
    fn variance_target_captures_fraction() {
        let rows = random_rows(200, 6, 2);
        let data = labeled(6, &rows, vec![0; 200]);
        let model = fit_class_pca(&data, 1, &PcaOptions::default()).unwrap();
        let c = model.class(0).unwrap();
        let kept: f64 = c.eigenvalues.iter().sum();
        assert!(kept >= 0.95 * c.total_variance);
        let without_last: f64 = c.eigenvalues[..c.components() - 1].iter().sum();
        assert!(without_last < 0.95 * c.total_variance);
    }

    #[test]
    fn scatter_and_gram_paths_agree() {
        for (n, d, seed) in [(5, 8, 3), (8, 8, 4), (9, 8, 5), (20, 6, 6)] {
            let rows = random_rows(n, d, seed);
            let data = labeled(d, &rows, vec![0; n]);
            let probe = random_rows(4, d, seed + 100);
            let target = ComponentTarget::Fixed(3);
            let fit = |path| fit_class_pca(&data, 1, &PcaOptions { target, path, center: true }).unwrap();
            let (a, b) = (fit(EigenPath::Scatter), fit(EigenPath::Gram));
            let (ca, cb) = (a.class(0).unwrap(), b.class(0).unwrap());
            assert_eq!(ca.components(), cb.components());
            for (x, y) in ca.eigenvalues.iter().zip(&cb.eigenvalues) {
                assert!((x - y).abs() < 1e-8);
            }
            for p in &probe {
                assert!((a.fre_score(p, 0).unwrap() - b.fre_score(p, 0).unwrap()).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn sparse_classes() {
        let data = labeled(2, &[vec![1.0, 2.0], vec![0.0, 0.0], vec![1.0, 1.0]], vec![0, 2, 2]);
        let model = fit_class_pca(&data, 3, &PcaOptions::default()).unwrap();
        let single = model.class(0).unwrap();
        assert_eq!(single.components(), 0);
        assert!((model.fre_score(&[1.0, 3.0], 0).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(model.fre_score(&[0.0, 0.0], 1).unwrap_err(), Error::Scoring(_)));
    }

    #[test]
    fn container_round_trip() {
        let rows = random_rows(10, 3, 7);
        let data = labeled(3, &rows, (0..10).map(|i| i % 3).collect());
        let model = fit_class_pca(&data, 4, &PcaOptions::default()).unwrap();
        let back = ClassPcaModel::from_container(&model.to_container()).unwrap();
        assert_eq!(back, model);
    }

    proptest! {
        #[test]
        fn pythagorean_identity_and_orthonormality(n in 2usize..25, d in 1usize..7, seed in 0u64..1000, l in 0usize..7) {
            let rows = random_rows(n, d, seed);
            let data = labeled(d, &rows, vec![0; n]);
            let model = fit_class_pca(&data, 1, &PcaOptions { target: ComponentTarget::Fixed(l), ..PcaOptions::default() }).unwrap();
            let c = model.class(0).unwrap();
            prop_assert!(c.components() <= d.min(n - 1));
            let gram = c.basis.tr_mul(&c.basis);
            let eye = DMatrix::<f64>::identity(c.components(), c.components());
            prop_assert!((gram - eye).abs().max() < 1e-8);
            let sq: f64 = rows.iter().map(|r| model.fre_score(r, 0).unwrap().powi(2)).sum();
            prop_assert!((sq / (n - 1) as f64 - c.discarded_variance()).abs() < 1e-8);
        }

        #[test]
        fn fre_ignores_in_subspace_shifts_and_scales_about_mean(seed in 0u64..1000, alpha in 0.0f64..4.0) {
            let rows = random_rows(15, 5, seed);
            let data = labeled(5, &rows, vec![0; 15]);
            let model = fit_class_pca(&data, 1, &PcaOptions { target: ComponentTarget::Fixed(2), ..PcaOptions::default() }).unwrap();
            let c = model.class(0).unwrap();
            let z = DVector::from_vec(random_rows(1, 5, seed + 1)[0].clone());
            let base = model.fre_score(z.as_slice(), 0).unwrap();
            let shifted = &z + &c.basis * DVector::from_vec(vec![1.5, -0.5]);
            prop_assert!((model.fre_score(shifted.as_slice(), 0).unwrap() - base).abs() < 1e-10);
            let scaled = &z * alpha + &c.mean * (1.0 - alpha);
            prop_assert!((model.fre_score(scaled.as_slice(), 0).unwrap() - alpha * base).abs() < 1e-10);
        }
    }
}
