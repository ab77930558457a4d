use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::FeatureMatrix;
use crate::error::{Error, Result};
use crate::rng::{self, streams};

/// Feature-space corruption families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// i.i.d. Gaussian noise with std = magnitude.
    AdditiveGaussian,
    /// Every row multiplied by magnitude.
    FeatureScale,
    /// Each element zeroed independently with probability = magnitude.
    FeatureDropoutMask,
    /// Every row translated by magnitude along one seed-chosen unit direction.
    MeanDrift,
}

impl ShiftKind {
    pub const ALL: [ShiftKind; 4] = [
        ShiftKind::AdditiveGaussian,
        ShiftKind::FeatureScale,
        ShiftKind::FeatureDropoutMask,
        ShiftKind::MeanDrift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShiftKind::AdditiveGaussian => "additive_gaussian",
            ShiftKind::FeatureScale => "feature_scale",
            ShiftKind::FeatureDropoutMask => "feature_dropout_mask",
            ShiftKind::MeanDrift => "mean_drift",
        }
    }

    /// Magnitudes for intensities 1..=5, strictly increasing.
    pub fn schedule(self) -> [f64; 5] {
        match self {
            ShiftKind::AdditiveGaussian => [0.25, 0.5, 0.75, 1.0, 1.5],
            ShiftKind::FeatureScale => [1.25, 1.5, 2.0, 2.5, 3.0],
            ShiftKind::FeatureDropoutMask => [0.1, 0.2, 0.3, 0.45, 0.6],
            ShiftKind::MeanDrift => [0.5, 1.0, 1.5, 2.0, 3.0],
        }
    }
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShiftKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| {
                let names: Vec<_> = ShiftKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown shift kind {s:?}; valid kinds: {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub intensity: u8,
    /// Replaces the scheduled magnitude when set.
    pub magnitude: Option<f64>,
}

impl ShiftSpec {
    pub fn new(kind: ShiftKind, intensity: u8) -> Self {
        Self { kind, intensity, magnitude: None }
    }

    pub fn magnitude(&self) -> Result<f64> {
        if !(1..=5).contains(&self.intensity) {
            return Err(Error::Config(format!(
                "shift intensity must be in 1..=5, got {}",
                self.intensity
            )));
        }
        Ok(self
            .magnitude
            .unwrap_or(self.kind.schedule()[self.intensity as usize - 1]))
    }

    /// The full kind x intensity grid, kinds in declaration order.
    pub fn suite(kinds: &[ShiftKind], intensities: &[u8]) -> Vec<ShiftSpec> {
        kinds
            .iter()
            .flat_map(|&k| intensities.iter().map(move |&i| ShiftSpec::new(k, i)))
            .collect()
    }
}

/// Shifted copy of `data`. Ids, labels and shape are untouched.
pub fn apply_shift(data: &FeatureMatrix, shift: &ShiftSpec, seed: u64) -> Result<FeatureMatrix> {
    let magnitude = shift.magnitude()?;
    let stream = streams::SHIFT * 64 + shift.kind as u64 * 8 + u64::from(shift.intensity);
    let mut rng = rng::stream(seed, stream);
    let mut values = data.values().to_vec();
    match shift.kind {
        ShiftKind::AdditiveGaussian => {
            if magnitude != 0.0 {
                for v in &mut values {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *v += magnitude * e;
                }
            }
        }
        ShiftKind::FeatureScale => values.iter_mut().for_each(|v| *v *= magnitude),
        ShiftKind::FeatureDropoutMask => {
            if !(0.0..=1.0).contains(&magnitude) {
                return Err(Error::Config(format!("dropout fraction {magnitude} outside [0, 1]")));
            }
            for v in &mut values {
                if rng.random::<f64>() < magnitude {
                    *v = 0.0;
                }
            }
        }
        ShiftKind::MeanDrift => {
            let d = data.d();
            let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            dir.iter_mut().for_each(|x| *x /= norm);
            for row in values.chunks_mut(d.max(1)) {
                for (v, u) in row.iter_mut().zip(&dir) {
                    *v += magnitude * u;
                }
            }
        }
    }
    data.with_values(data.d(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_mixture, DatasetSpec};

    fn data() -> FeatureMatrix {
        generate_mixture(&DatasetSpec {
            n_per_class: 100,
            ..DatasetSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_magnitude_gaussian_is_identity() {
        let d = data();
        let shift = ShiftSpec {
            magnitude: Some(0.0),
            ..ShiftSpec::new(ShiftKind::AdditiveGaussian, 2)
        };
        assert_eq!(apply_shift(&d, &shift, 1).unwrap(), d);
    }

    #[test]
    fn scale_multiplies_norms_exactly() {
        let d = data();
        let shift = ShiftSpec {
            magnitude: Some(2.0),
            ..ShiftSpec::new(ShiftKind::FeatureScale, 1)
        };
        let out = apply_shift(&d, &shift, 0).unwrap();
        for (a, b) in d.rows().zip(out.rows()) {
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((nb - 2.0 * na).abs() <= 1e-12 * na.max(1.0));
        }
    }

    #[test]
    fn gaussian_noise_std_matches_level() {
        // 1000 rows x 16 dims = 16000 elements
        let d = data();
        let shift = ShiftSpec::new(ShiftKind::AdditiveGaussian, 3);
        let out = apply_shift(&d, &shift, 42).unwrap();
        let diffs: Vec<f64> = out.values().iter().zip(d.values()).map(|(a, b)| a - b).collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let want = shift.magnitude().unwrap();
        assert!((std - want).abs() / want < 0.05, "std {std} want {want}");
    }

    #[test]
    fn shifts_preserve_ids_labels_and_shape() {
        let d = data();
        for spec in ShiftSpec::suite(&ShiftKind::ALL, &[1, 2, 3, 4, 5]) {
            let out = apply_shift(&d, &spec, 3).unwrap();
            assert_eq!(out.ids(), d.ids());
            assert_eq!(out.labels(), d.labels());
            assert_eq!((out.n(), out.d()), (d.n(), d.d()));
            assert_eq!(out, apply_shift(&d, &spec, 3).unwrap());
        }
    }

    #[test]
    fn schedules_strictly_increase() {
        for kind in ShiftKind::ALL {
            let s = kind.schedule();
            assert!(s.windows(2).all(|w| w[0] < w[1]), "{kind}");
        }
    }

    #[test]
    fn intensity_bounds_and_unknown_kind() {
        let d = data();
        for bad in [0, 6] {
            let err = apply_shift(&d, &ShiftSpec::new(ShiftKind::MeanDrift, bad), 0).unwrap_err();
            assert!(err.is_config_error());
        }
        let err = "motion_blur".parse::<ShiftKind>().unwrap_err();
        assert!(err.to_string().contains("additive_gaussian"));
    }
}
