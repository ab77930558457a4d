//! Acquisition scores and selectors.

mod scores;
mod select;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LossKind;

pub use scores::{entropy, score_bald, score_entropy, score_featuresim, score_fre, FeatureBank};
pub use select::{
    coverage_radius, select_kcenter_greedy, select_per_class, select_random, select_top, ScoredCandidate, Selection,
    SelectionRequest,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Random,
    Entropy,
    Bald,
    Coreset,
    Featuresim,
    Fre,
}

/// Which end of the score ranking is acquired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    SelectMin,
    SelectMax,
}

impl Direction {
    /// Map a score so that larger always means "more likely acquired" (and,
    /// for OOD detection, "more out-of-distribution").
    pub fn orient(self, score: f64) -> f64 {
        match self {
            Direction::SelectMax => score,
            Direction::SelectMin => -score,
        }
    }
}

/// How a strategy picks its batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selector {
    /// Uniform without replacement.
    Random,
    /// Farthest-point cover of the candidate features.
    KCenterGreedy,
    /// Rank scores; per-predicted-class quotas when `per_class` is set.
    Ranked { direction: Direction, per_class: bool },
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::Random,
        StrategyKind::Entropy,
        StrategyKind::Bald,
        StrategyKind::Coreset,
        StrategyKind::Featuresim,
        StrategyKind::Fre,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Random => "random",
            StrategyKind::Entropy => "entropy",
            StrategyKind::Bald => "bald",
            StrategyKind::Coreset => "coreset",
            StrategyKind::Featuresim => "featuresim",
            StrategyKind::Fre => "fre",
        }
    }

    /// featuresim and fre, which pair contrastive training with per-class quotas.
    pub fn is_scal(self) -> bool {
        matches!(self, StrategyKind::Featuresim | StrategyKind::Fre)
    }

    pub fn selector(self) -> Selector {
        match self {
            StrategyKind::Random => Selector::Random,
            StrategyKind::Coreset => Selector::KCenterGreedy,
            StrategyKind::Entropy | StrategyKind::Bald => Selector::Ranked {
                direction: Direction::SelectMax,
                per_class: false,
            },
            StrategyKind::Featuresim => Selector::Ranked {
                direction: Direction::SelectMin,
                per_class: true,
            },
            StrategyKind::Fre => Selector::Ranked {
                direction: Direction::SelectMax,
                per_class: true,
            },
        }
    }

    /// Orientation of the strategy's score for OOD ranking. Random has no
    /// score and coreset ranks by distance to the labeled set, both "higher =
    /// farther".
    pub fn direction(self) -> Direction {
        match self.selector() {
            Selector::Ranked { direction, .. } => direction,
            _ => Direction::SelectMax,
        }
    }

    pub fn default_loss(self) -> LossKind {
        if self.is_scal() {
            LossKind::Contrastive
        } else {
            LossKind::CrossEntropy
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| {
                let names: Vec<_> = StrategyKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown strategy {s:?}; valid strategies: {}", names.join(" | ")))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(k.name().parse::<StrategyKind>().unwrap(), k);
        }
    }

    #[test]
    fn typo_lists_valid_names() {
        let err = "featursim".parse::<StrategyKind>().unwrap_err();
        let msg = err.to_string();
        for k in StrategyKind::ALL {
            assert!(msg.contains(k.name()));
        }
        assert!(err.is_config_error());
    }

    #[test]
    fn directions() {
        assert_eq!(StrategyKind::Featuresim.direction(), Direction::SelectMin);
        assert_eq!(StrategyKind::Fre.direction(), Direction::SelectMax);
        assert_eq!(Direction::SelectMin.orient(2.0), -2.0);
    }
}
