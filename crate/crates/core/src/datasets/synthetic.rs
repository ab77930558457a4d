use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::FeatureMatrix;
use crate::error::{Error, Result};
use crate::rng::{self, streams};

/// Parameters of a Gaussian-mixture classification dataset with optional
/// long-tailed class sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: usize,
    pub dim: usize,
    /// Size of the most frequent class (class 0).
    pub n_per_class: usize,
    /// Ratio of the largest to the smallest class size, `>= 1`.
    pub imbalance_ratio: f64,
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 16,
            n_per_class: 500,
            imbalance_ratio: 1.0,
            class_separation: 3.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.dim < 2 {
            return Err(Error::Config(format!("need dimension >= 2, got {}", self.dim)));
        }
        if self.dim < self.classes {
            return Err(Error::Config(format!(
                "class centers sit on the first {} axes; dimension {} is too small",
                self.classes, self.dim
            )));
        }
        if !(self.imbalance_ratio.is_finite() && self.imbalance_ratio >= 1.0) {
            return Err(Error::Config(format!(
                "imbalance ratio must be >= 1, got {}",
                self.imbalance_ratio
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) || !self.class_separation.is_finite() {
            return Err(Error::Config("noise sigma and class separation must be finite, sigma >= 0".into()));
        }
        if self.n_per_class == 0 {
            return Err(Error::Config("n_per_class must be positive".into()));
        }
        Ok(())
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Per-class sample counts `n_k = round(n_0 * rho^(-k/(K-1)))`.
///
/// Rounding surplus or deficit against the rounded exact total is charged to
/// class 0, the most frequent one.
pub fn class_sizes(spec: &DatasetSpec) -> Result<Vec<usize>> {
    if spec.classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", spec.classes)));
    }
    if !(spec.imbalance_ratio.is_finite() && spec.imbalance_ratio >= 1.0) {
        return Err(Error::Config(format!("imbalance ratio must be >= 1, got {}", spec.imbalance_ratio)));
    }
    let last = (spec.classes - 1) as f64;
    let exact: Vec<f64> = (0..spec.classes)
        .map(|k| spec.n_per_class as f64 * spec.imbalance_ratio.powf(-(k as f64) / last))
        .collect();
    let mut sizes: Vec<usize> = exact.iter().map(|&x| round_half_up(x)).collect();
    let target = round_half_up(exact.iter().sum());
    let total: usize = sizes.iter().sum();
    sizes[0] = (sizes[0] + target).checked_sub(total).ok_or_else(|| {
        Error::Config("rounding adjustment would empty the largest class".into())
    })?;
    if let Some(k) = sizes.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!(
            "class {k} would receive no samples; raise n_per_class or lower the imbalance ratio"
        )));
    }
    Ok(sizes)
}

/// Labeled draw from an isotropic Gaussian mixture with centers at
/// `class_separation * e_k`. Rows are shuffled so ids carry no class order.
///
/// Values are rounded to `f32` precision so the binary format round-trips
/// them exactly.
pub fn generate_mixture(spec: &DatasetSpec) -> Result<FeatureMatrix> {
    spec.validate()?;
    let sizes = class_sizes(spec)?;
    let mut rng = rng::stream(spec.seed, streams::MIXTURE);
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(sizes.iter().sum());
    for (k, &count) in sizes.iter().enumerate() {
        for _ in 0..count {
            let row = (0..spec.dim)
                .map(|j| {
                    let center = if j == k { spec.class_separation } else { 0.0 };
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    (center + spec.noise_sigma * noise) as f32 as f64
                })
                .collect();
            rows.push((row, k));
        }
    }
    rows.shuffle(&mut rng);
    let labels = rows.iter().map(|(_, k)| *k).collect();
    let values = rows.into_iter().flat_map(|(r, _)| r).collect();
    FeatureMatrix::with_generated_ids(spec.dim, values, Some(labels))
}

/// Unlabeled out-of-distribution samples sharing the mixture's noise level but
/// centered on axes no class uses (`e_K .. e_{d-1}`), or on the negated class
/// axes when `d == K`.
pub fn generate_ood(spec: &DatasetSpec, n: usize, seed: u64) -> Result<FeatureMatrix> {
    spec.validate()?;
    let mut rng = rng::stream(seed, streams::OOD);
    let spare = spec.dim - spec.classes;
    let mut values = Vec::with_capacity(n * spec.dim);
    for i in 0..n {
        let (axis, sign) = if spare > 0 {
            (spec.classes + i % spare, 1.0)
        } else {
            (i % spec.classes, -1.0)
        };
        for j in 0..spec.dim {
            let center = if j == axis { sign * spec.class_separation } else { 0.0 };
            let noise: f64 = StandardNormal.sample(&mut rng);
            values.push((center + spec.noise_sigma * noise) as f32 as f64);
        }
    }
    let ids = (0..n).map(|i| format!("o{i:06}")).collect();
    FeatureMatrix::new(spec.dim, values, ids, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(classes: usize, n0: usize, rho: f64) -> DatasetSpec {
        DatasetSpec {
            classes,
            dim: classes.max(2),
            n_per_class: n0,
            imbalance_ratio: rho,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn balanced_sizes() {
        assert_eq!(class_sizes(&spec(2, 100, 1.0)).unwrap(), vec![100, 100]);
    }

    #[test]
    fn geometric_decay_by_hand() {
        // 90 * 9^(-k/2) = 90, 30, 10
        assert_eq!(class_sizes(&spec(3, 90, 9.0)).unwrap(), vec![90, 30, 10]);
    }

    #[test]
    fn long_tail_ratio_fifty() {
        let sizes = class_sizes(&spec(10, 5000, 50.0)).unwrap();
        assert_eq!(sizes[9], 100);
        let ratio = sizes[0] as f64 / sizes[9] as f64;
        assert!((ratio - 50.0).abs() < 0.05, "ratio {ratio}");
        for w in sizes.windows(2) {
            assert!(w[0] > w[1]);
        }
    }

    #[test]
    fn generated_histogram_matches_sizes() {
        let s = DatasetSpec {
            imbalance_ratio: 9.0,
            n_per_class: 90,
            classes: 3,
            dim: 4,
            ..DatasetSpec::default()
        };
        let m = generate_mixture(&s).unwrap();
        assert_eq!(m.class_counts(3).unwrap(), vec![90, 30, 10]);
        assert_eq!(m.d(), 4);
    }

    #[test]
    fn seed_determinism() {
        let s = DatasetSpec { n_per_class: 20, ..DatasetSpec::default() };
        assert_eq!(generate_mixture(&s).unwrap(), generate_mixture(&s).unwrap());
        let other = DatasetSpec { seed: 1, ..s.clone() };
        assert_ne!(generate_mixture(&s).unwrap(), generate_mixture(&other).unwrap());
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        for bad in [spec(1, 10, 1.0), spec(3, 10, 0.5), DatasetSpec { dim: 1, classes: 2, ..DatasetSpec::default() }] {
            assert!(generate_mixture(&bad).unwrap_err().is_config_error());
        }
    }

    #[test]
    fn ood_uses_spare_axes() {
        let s = DatasetSpec { noise_sigma: 0.0, ..DatasetSpec::default() };
        let ood = generate_ood(&s, 6, 0).unwrap();
        assert!(ood.labels().is_none());
        assert_eq!(ood.row(0)[10], 3.0);
        assert_eq!(ood.row(1)[11], 3.0);
        assert!(ood.row(0)[..10].iter().all(|&v| v == 0.0));
    }
}
