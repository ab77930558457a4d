//! The label-acquire-train cycle with a simulated oracle.
//!
//! Iteration 1 labels `M` pool samples drawn uniformly at random and trains
//! the first model. Every later iteration scores a fresh random subset of the
//! unlabeled pool with the previous model, labels the `M` samples the
//! strategy selects, and trains a new model from scratch. Each iteration ends
//! with one [`IterationReport`].

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::datasets::{apply_shift, FeatureMatrix, ShiftSpec};
use crate::error::{Error, Result};
use crate::flatconf::FlatConfig;
use crate::metrics::{self, query_cost, IterationReport, QueryCost, ShiftResult};
use crate::model::{train, LossKind, ModelConfig, ModelState};
use crate::pca::{fit_class_pca, ClassPcaModel, PcaOptions};
use crate::rng::{self, streams};
use crate::strategies::{
    score_bald, score_entropy, score_featuresim, score_fre, select_kcenter_greedy, select_per_class, select_random,
    select_top, FeatureBank, ScoredCandidate, SelectionRequest, Selector, StrategyKind,
};

/// Which labeled features the feature-guided scores compare against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureCache {
    /// Re-encode the whole labeled set with the current model.
    #[default]
    Recompute,
    /// Keep the features each sample got from the model trained right after
    /// it was labeled, and append new ones.
    Accumulate,
}

impl FeatureCache {
    pub fn name(self) -> &'static str {
        match self {
            FeatureCache::Recompute => "recompute",
            FeatureCache::Accumulate => "accumulate",
        }
    }
}

impl fmt::Display for FeatureCache {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureCache {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recompute" => Ok(FeatureCache::Recompute),
            "accumulate" => Ok(FeatureCache::Accumulate),
            _ => Err(Error::Config(format!("unknown feature cache {s:?} (expected recompute | accumulate)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub strategy: StrategyKind,
    /// Total labels `B`.
    pub budget: usize,
    /// Labels per iteration `M`.
    pub acquisition_size: usize,
    /// Unlabeled samples scored per iteration.
    pub subset_size: usize,
    /// Training loss; the strategy's default when unset.
    pub loss: Option<LossKind>,
    pub seed: u64,
    /// Stochastic passes for BALD.
    pub mc_passes: usize,
    pub feature_cache: FeatureCache,
    pub pca: PcaOptions,
    pub symmetric_featuresim: bool,
    pub ece_bins: usize,
    pub record_wall_time: bool,
}

impl LoopConfig {
    pub fn new(strategy: StrategyKind, budget: usize, acquisition_size: usize, subset_size: usize) -> Self {
        Self {
            strategy,
            budget,
            acquisition_size,
            subset_size,
            loss: None,
            seed: 0,
            mc_passes: 50,
            feature_cache: FeatureCache::Recompute,
            pca: PcaOptions::default(),
            symmetric_featuresim: false,
            ece_bins: 15,
            record_wall_time: false,
        }
    }

    /// `T = B / M`.
    pub fn iterations(&self) -> usize {
        self.budget / self.acquisition_size.max(1)
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss.unwrap_or_else(|| self.strategy.default_loss())
    }

    pub fn validate(&self) -> Result<()> {
        if self.acquisition_size == 0 || self.budget == 0 {
            return Err(Error::Config("budget and acquisition size must be positive".into()));
        }
        if self.budget % self.acquisition_size != 0 {
            return Err(Error::Config(format!(
                "budget {} is not a multiple of the acquisition size {}",
                self.budget, self.acquisition_size
            )));
        }
        if self.subset_size < self.acquisition_size {
            return Err(Error::Config(format!(
                "subset size {} is smaller than the acquisition size {}",
                self.subset_size, self.acquisition_size
            )));
        }
        if self.mc_passes < 2 {
            return Err(Error::Config(format!("mc_passes must be at least 2, got {}", self.mc_passes)));
        }
        if self.ece_bins == 0 {
            return Err(Error::Config("ece_bins must be positive".into()));
        }
        Ok(())
    }
}

/// Labeled and unlabeled index sets over a universe of `0..n` row indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolState {
    universe: usize,
    labeled: Vec<usize>,
    is_labeled: Vec<bool>,
    unlabeled: Vec<usize>,
    history: Vec<Vec<usize>>,
}

impl PoolState {
    pub fn new(universe: usize) -> Self {
        Self {
            universe,
            labeled: Vec::new(),
            is_labeled: vec![false; universe],
            unlabeled: (0..universe).collect(),
            history: Vec::new(),
        }
    }

    pub fn universe(&self) -> usize {
        self.universe
    }

    /// In acquisition order.
    pub fn labeled_ids(&self) -> &[usize] {
        &self.labeled
    }

    /// Ascending.
    pub fn unlabeled_ids(&self) -> &[usize] {
        &self.unlabeled
    }

    /// Number of completed acquisitions.
    pub fn iteration(&self) -> usize {
        self.history.len()
    }

    pub fn history(&self) -> &[Vec<usize>] {
        &self.history
    }

    pub fn is_labeled(&self, id: usize) -> bool {
        self.is_labeled.get(id).copied().unwrap_or(false)
    }

    /// Move `ids` from unlabeled to labeled as one acquisition.
    pub fn acquire(&mut self, ids: &[usize]) -> Result<()> {
        let mut batch = vec![false; self.universe];
        for &id in ids {
            if id >= self.universe {
                return Err(Error::UnknownId(id));
            }
            if self.is_labeled[id] || batch[id] {
                return Err(Error::Selection(format!("sample {id} acquired twice")));
            }
            batch[id] = true;
        }
        for &id in ids {
            self.is_labeled[id] = true;
        }
        self.labeled.extend_from_slice(ids);
        self.unlabeled.retain(|&id| !batch[id]);
        self.history.push(ids.to_vec());
        Ok(())
    }

    /// Partition and history consistency.
    pub fn check_invariants(&self) -> Result<()> {
        let violation = |m: String| Err(Error::Contract(format!("pool invariant violated: {m}")));
        if self.labeled.len() + self.unlabeled.len() != self.universe {
            return violation(format!(
                "{} labeled + {} unlabeled != {}",
                self.labeled.len(),
                self.unlabeled.len(),
                self.universe
            ));
        }
        let mut seen = vec![0u8; self.universe];
        for &id in self.labeled.iter().chain(&self.unlabeled) {
            match seen.get_mut(id) {
                Some(s) if *s == 0 => *s = 1,
                Some(_) => return violation(format!("sample {id} appears twice")),
                None => return violation(format!("sample {id} outside the universe")),
            }
        }
        if self.labeled.iter().any(|&id| !self.is_labeled[id]) || self.unlabeled.iter().any(|&id| self.is_labeled[id]) {
            return violation("labeled flags disagree with the index sets".into());
        }
        if self.history.concat() != self.labeled {
            return violation("acquisition history does not replay to the labeled set".into());
        }
        Ok(())
    }
}

/// Simulated annotator backed by ground-truth labels.
#[derive(Debug, Clone, Copy)]
pub struct Oracle<'a> {
    labels: &'a [usize],
}

impl<'a> Oracle<'a> {
    pub fn new(universe: &'a FeatureMatrix) -> Result<Self> {
        Ok(Self {
            labels: universe.require_labels()?,
        })
    }

    pub fn label(&self, ids: &[usize]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|&id| self.labels.get(id).copied().ok_or(Error::UnknownId(id)))
            .collect()
    }
}

/// Held-out data every iteration is evaluated on.
#[derive(Debug, Clone)]
pub struct EvalSets {
    pub test: FeatureMatrix,
    pub shifted: Vec<(ShiftSpec, FeatureMatrix)>,
    pub ood: Option<FeatureMatrix>,
}

impl EvalSets {
    pub fn new(test: FeatureMatrix) -> Result<Self> {
        test.require_labels()?;
        if test.is_empty() {
            return Err(Error::Usage("test set is empty".into()));
        }
        Ok(Self {
            test,
            shifted: Vec::new(),
            ood: None,
        })
    }

    /// Add a shifted copy of the test set for every spec.
    pub fn with_shifts(mut self, specs: &[ShiftSpec], seed: u64) -> Result<Self> {
        for spec in specs {
            let shifted = apply_shift(&self.test, spec, seed)?;
            self.shifted.push((*spec, shifted));
        }
        Ok(self)
    }

    pub fn with_ood(mut self, ood: FeatureMatrix) -> Result<Self> {
        if ood.d() != self.test.d() {
            return Err(Error::shape(format!("OOD dimension {}", self.test.d()), ood.d()));
        }
        if ood.is_empty() {
            return Err(Error::Usage("OOD set is empty".into()));
        }
        self.ood = Some(ood);
        Ok(self)
    }
}

/// Scores from one scoring pass over a candidate set.
#[derive(Debug, Clone)]
pub struct Scored {
    /// Raw strategy scores; empty for random and coreset.
    pub scores: Vec<f64>,
    /// Classifier argmax, when the pass produced probabilities.
    pub predicted: Option<Vec<usize>>,
    pub features: Option<FeatureMatrix>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScorerOptions {
    pub mc_passes: usize,
    pub pca: PcaOptions,
    pub symmetric_featuresim: bool,
    /// Seed for BALD dropout masks.
    pub seed: u64,
}

impl ScorerOptions {
    pub fn from_loop(config: &LoopConfig, seed: u64) -> Self {
        Self {
            mc_passes: config.mc_passes,
            pca: config.pca,
            symmetric_featuresim: config.symmetric_featuresim,
            seed,
        }
    }
}

/// A trained model with the labeled features and per-class transforms its
/// strategy scores against.
#[derive(Debug, Clone)]
pub struct Scorer {
    model: ModelState,
    strategy: StrategyKind,
    labeled_features: FeatureMatrix,
    bank: Option<FeatureBank>,
    pca: Option<ClassPcaModel>,
    options: ScorerOptions,
}

impl Scorer {
    /// `labeled_features` are encoder features with true labels.
    pub fn new(
        model: ModelState,
        strategy: StrategyKind,
        labeled_features: FeatureMatrix,
        options: ScorerOptions,
    ) -> Result<Self> {
        let classes = model.config().classes;
        if labeled_features.d() != model.config().d_feat {
            return Err(Error::shape(
                format!("feature dimension {}", model.config().d_feat),
                labeled_features.d(),
            ));
        }
        let bank = match strategy {
            StrategyKind::Featuresim => {
                let mut bank = FeatureBank::new(&labeled_features, classes)?;
                bank.symmetric = options.symmetric_featuresim;
                Some(bank)
            }
            _ => None,
        };
        let pca = match strategy {
            StrategyKind::Fre => Some(fit_class_pca(&labeled_features, classes, &options.pca)?),
            _ => None,
        };
        Ok(Self {
            model,
            strategy,
            labeled_features,
            bank,
            pca,
            options,
        })
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn strategy(&self) -> StrategyKind {
        self.strategy
    }

    pub fn labeled_features(&self) -> &FeatureMatrix {
        &self.labeled_features
    }

    pub fn pca(&self) -> Option<&ClassPcaModel> {
        self.pca.as_ref()
    }

    /// The strategy's scoring pass over `x`.
    pub fn score(&self, x: &FeatureMatrix) -> Result<Scored> {
        match self.strategy {
            StrategyKind::Random => Ok(Scored {
                scores: Vec::new(),
                predicted: None,
                features: None,
            }),
            StrategyKind::Coreset => Ok(Scored {
                scores: Vec::new(),
                predicted: None,
                features: Some(self.model.encode(x)?),
            }),
            StrategyKind::Entropy => {
                let inference = self.model.infer(x)?;
                Ok(Scored {
                    scores: score_entropy(&inference.probs)?,
                    predicted: Some(inference.predicted()),
                    features: Some(inference.features),
                })
            }
            StrategyKind::Bald => {
                let slices = self.model.stochastic_proba(
                    x,
                    self.options.mc_passes,
                    self.model.config().dropout_rate,
                    self.options.seed,
                )?;
                let mut mean = DMatrix::zeros(x.n(), self.model.config().classes);
                for s in &slices {
                    mean += s;
                }
                mean /= slices.len() as f64;
                Ok(Scored {
                    scores: score_bald(&slices)?,
                    predicted: Some(crate::model::argmax_rows(&mean)),
                    features: None,
                })
            }
            StrategyKind::Featuresim | StrategyKind::Fre => {
                let inference = self.model.infer(x)?;
                let predicted = inference.predicted();
                let scores = (0..x.n())
                    .map(|i| {
                        let z = inference.features.row(i);
                        match (&self.bank, &self.pca) {
                            (Some(bank), _) => score_featuresim(z, predicted[i], bank),
                            (_, Some(pca)) => fre_with_fallback(z, predicted[i], pca),
                            _ => Err(Error::Scoring("scorer was built without its feature state".into())),
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Scored {
                    scores,
                    predicted: Some(predicted),
                    features: Some(inference.features),
                })
            }
        }
    }

    /// Scores oriented so that higher means farther from the labeled data,
    /// for OOD ranking. Random, which has no score of its own, falls back to
    /// predictive entropy; coreset uses the distance to the nearest labeled
    /// feature.
    pub fn ood_scores(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        match self.strategy {
            StrategyKind::Random => score_entropy(&self.model.predict_proba(x)?),
            StrategyKind::Coreset => {
                let z = self.model.encode(x)?;
                if self.labeled_features.is_empty() {
                    return Err(Error::Scoring("coreset scorer has no labeled features".into()));
                }
                Ok(z.rows()
                    .map(|q| {
                        self.labeled_features
                            .rows()
                            .map(|c| q.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                            .fold(f64::INFINITY, f64::min)
                            .sqrt()
                    })
                    .collect())
            }
            kind => {
                let direction = kind.direction();
                Ok(self.score(x)?.scores.into_iter().map(|s| direction.orient(s)).collect())
            }
        }
    }

    /// Model, labeled features and scoring options in one checkpoint. Class
    /// transforms are refit from the stored features on load.
    pub fn to_container(&self) -> Container {
        let mut c = self.model.to_container();
        let f = &self.labeled_features;
        c.meta.set("scorer.strategy", self.strategy.name());
        c.meta.set("scorer.mc_passes", self.options.mc_passes);
        c.meta.set("scorer.symmetric_featuresim", self.options.symmetric_featuresim);
        c.meta.set("scorer.seed", self.options.seed);
        c.meta.set("scorer.pca.center", self.options.pca.center);
        c.meta.set("scorer.pca.target", pca_target_name(&self.options.pca));
        c.meta.set("scorer.labeled_ids", f.ids().join(","));
        c.push("scorer.labeled_features", f.to_dmatrix());
        let labels = f.labels().unwrap_or_default();
        c.push(
            "scorer.labeled_labels",
            DMatrix::from_iterator(labels.len(), 1, labels.iter().map(|&y| y as f64)),
        );
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let model = ModelState::from_container(c)?;
        let missing = |k: &str| Error::Usage(format!("checkpoint lacks {k}"));
        let strategy: StrategyKind = c
            .meta
            .raw("scorer.strategy")
            .ok_or_else(|| missing("scorer.strategy"))?
            .parse()?;
        let values = c.tensor("scorer.labeled_features")?;
        let labels: Vec<usize> = c.tensor("scorer.labeled_labels")?.iter().map(|&y| y as usize).collect();
        let ids: Vec<String> = c
            .meta
            .raw("scorer.labeled_ids")
            .filter(|s| !s.is_empty())
            .map(|s| s.split(',').map(str::to_string).collect())
            .unwrap_or_default();
        let features = FeatureMatrix::from_dmatrix(values, ids, Some(labels))?;
        let mut pca = PcaOptions::default();
        pca.center = c.meta.get_or("scorer.pca.center", pca.center)?;
        if let Some(t) = c.meta.raw("scorer.pca.target") {
            pca.target = parse_pca_target(t)?;
        }
        let options = ScorerOptions {
            mc_passes: c.meta.get_or("scorer.mc_passes", 50)?,
            pca,
            symmetric_featuresim: c.meta.get_or("scorer.symmetric_featuresim", false)?,
            seed: c.meta.get_or("scorer.seed", 0)?,
        };
        Self::new(model, strategy, features, options)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// fre under the predicted class, or under the best-fitting fitted class
/// when the predicted class has no labeled features yet.
fn fre_with_fallback(z: &[f64], k: usize, pca: &ClassPcaModel) -> Result<f64> {
    if pca.class(k).is_some() {
        return score_fre(z, k, pca);
    }
    log::debug!("no PCA transform for class {k}; scoring against the nearest fitted class");
    let mut best: Option<f64> = None;
    for j in (0..pca.num_classes()).filter(|&j| pca.class(j).is_some()) {
        let e = score_fre(z, j, pca)?;
        best = Some(best.map_or(e, |b| b.min(e)));
    }
    best.ok_or_else(|| Error::Scoring("no class has a fitted PCA transform".into()))
}

/// `var:0.95` or `fixed:4`.
pub fn pca_target_name(options: &PcaOptions) -> String {
    match options.target {
        crate::pca::ComponentTarget::Fixed(c) => format!("fixed:{c}"),
        crate::pca::ComponentTarget::Variance(v) => format!("var:{v}"),
    }
}

pub fn parse_pca_target(s: &str) -> Result<crate::pca::ComponentTarget> {
    use crate::pca::ComponentTarget;
    let bad = || Error::Config(format!("PCA target {s:?} is not var:<fraction> or fixed:<count>"));
    match s.split_once(':') {
        Some(("var", v)) => {
            let v: f64 = v.trim().parse().map_err(|_| bad())?;
            if !(0.0..=1.0).contains(&v) {
                return Err(bad());
            }
            Ok(ComponentTarget::Variance(v))
        }
        Some(("fixed", c)) => Ok(ComponentTarget::Fixed(c.trim().parse().map_err(|_| bad())?)),
        _ => Err(bad()),
    }
}

/// Everything a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct LoopOutcome {
    pub reports: Vec<IterationReport>,
    pub pool: PoolState,
    /// Scorer of the last trained model.
    pub scorer: Scorer,
    /// The pool ran out before the budget was spent.
    pub truncated: bool,
}

pub fn run_active_learning(
    pool: &FeatureMatrix,
    eval: &EvalSets,
    model: &ModelConfig,
    config: &LoopConfig,
) -> Result<LoopOutcome> {
    run_active_learning_with(pool, eval, model, config, |_| Ok(()))
}

/// As [`run_active_learning`], calling `on_report` as each iteration
/// finishes.
///
/// Iteration `t` trains its model with seed `derive(config.seed, t)`;
/// `model.seed` is ignored.
pub fn run_active_learning_with(
    pool: &FeatureMatrix,
    eval: &EvalSets,
    model: &ModelConfig,
    config: &LoopConfig,
    mut on_report: impl FnMut(&IterationReport) -> Result<()>,
) -> Result<LoopOutcome> {
    config.validate()?;
    model.validate()?;
    let oracle = Oracle::new(pool)?;
    let classes = model.classes;
    if pool.d() != model.d_in || eval.test.d() != model.d_in {
        return Err(Error::shape(format!("input dimension {}", model.d_in), pool.d()));
    }
    if pool.label_cardinality() > classes || eval.test.label_cardinality() > classes {
        return Err(Error::Config(format!("labels exceed the configured {classes} classes")));
    }
    if config.subset_size > pool.n() {
        return Err(Error::Config(format!(
            "subset size {} exceeds the pool size {}",
            config.subset_size,
            pool.n()
        )));
    }
    let m = config.acquisition_size;
    let loss = config.loss_kind();
    let mut state = PoolState::new(pool.n());
    let mut reports = Vec::with_capacity(config.iterations());
    let mut scorer: Option<Scorer> = None;
    let mut accumulated: Option<FeatureMatrix> = None;
    let mut truncated = false;

    for t in 1..=config.iterations() {
        if state.unlabeled_ids().is_empty() {
            log::warn!("pool exhausted before iteration {t}");
            truncated = true;
            break;
        }
        let iter_seed = rng::derive(config.seed, t as u64);
        let take = m.min(state.unlabeled_ids().len());
        let partial = take < m;

        let (acquisition, cost) = match &scorer {
            None => (
                Acquisition {
                    ids: select_random(state.unlabeled_ids(), take, iter_seed)?,
                    refilled: 0,
                    predicted: None,
                },
                QueryCost::default(),
            ),
            Some(prev) => {
                let (acq, cost) = query_cost(prev.model(), || acquire(prev, pool, &state, take, config, iter_seed));
                (acq?, cost)
            }
        };
        oracle.label(&acquisition.ids)?;
        state.acquire(&acquisition.ids)?;
        state.check_invariants()?;

        let labeled = pool.select(state.labeled_ids());
        let mut model_cfg = model.clone();
        model_cfg.seed = iter_seed;
        let (trained, train_report) = train(&model_cfg, &labeled, loss)?;
        let features = match config.feature_cache {
            FeatureCache::Recompute => trained.encode(&labeled)?,
            FeatureCache::Accumulate => {
                let fresh = trained.encode(&pool.select(&acquisition.ids))?;
                match accumulated.take() {
                    Some(acc) => acc.concat(&fresh)?,
                    None => fresh,
                }
            }
        };
        if config.feature_cache == FeatureCache::Accumulate {
            accumulated = Some(features.clone());
        }
        let next = Scorer::new(trained, config.strategy, features, ScorerOptions::from_loop(config, iter_seed))?;

        let class_counts = labeled.class_counts(classes)?;
        let report = evaluate(
            &next,
            eval,
            config,
            EvalContext {
                iteration: t,
                labeled_count: state.labeled_ids().len(),
                class_counts,
                acquisition: &acquisition,
                cost,
                truncated: partial,
                train_loss: train_report.loss_history.last().copied(),
            },
        )?;
        on_report(&report)?;
        reports.push(report);
        scorer = Some(next);
        if partial {
            log::warn!("pool exhausted at iteration {t}: acquired {take} of {m}");
            truncated = true;
            break;
        }
    }
    Ok(LoopOutcome {
        reports,
        pool: state,
        scorer: scorer.ok_or_else(|| Error::Usage("no iteration ran".into()))?,
        truncated,
    })
}

#[derive(Debug, Clone)]
struct Acquisition {
    ids: Vec<usize>,
    refilled: usize,
    predicted: Option<Vec<usize>>,
}

/// Score a fresh random subset of the unlabeled pool and pick `take` ids.
fn acquire(
    scorer: &Scorer,
    pool: &FeatureMatrix,
    state: &PoolState,
    take: usize,
    config: &LoopConfig,
    seed: u64,
) -> Result<Acquisition> {
    let unlabeled = state.unlabeled_ids();
    if config.strategy == StrategyKind::Random {
        return Ok(Acquisition {
            ids: select_random(unlabeled, take, seed)?,
            refilled: 0,
            predicted: None,
        });
    }
    let size = config.subset_size.min(unlabeled.len());
    let mut rng = rng::stream(seed, streams::SUBSET);
    let mut subset: Vec<usize> = index::sample(&mut rng, unlabeled.len(), size)
        .into_iter()
        .map(|i| unlabeled[i])
        .collect();
    subset.sort_unstable();
    let candidates = pool.select(&subset);
    let scored = scorer.score(&candidates)?;
    match config.strategy.selector() {
        Selector::Random => unreachable!("random acquisition returns early"),
        Selector::KCenterGreedy => {
            let features = scored
                .features
                .ok_or_else(|| Error::Scoring("coreset scoring produced no features".into()))?;
            Ok(Acquisition {
                ids: select_kcenter_greedy(&features, &subset, scorer.labeled_features(), take)?,
                refilled: 0,
                predicted: None,
            })
        }
        Selector::Ranked { direction, per_class } => {
            let predicted = scored
                .predicted
                .ok_or_else(|| Error::Scoring("ranked strategy produced no predictions".into()))?;
            let ranked: Vec<ScoredCandidate> = subset
                .iter()
                .enumerate()
                .map(|(i, &id)| ScoredCandidate {
                    sample_id: id,
                    predicted: predicted[i],
                    score: scored.scores[i],
                    strategy: config.strategy,
                })
                .collect();
            let (ids, refilled) = if per_class {
                let selection = select_per_class(
                    &ranked,
                    &SelectionRequest {
                        m: take,
                        classes: scorer.model().config().classes,
                        direction,
                    },
                )?;
                (selection.ids, selection.refilled)
            } else {
                (select_top(&ranked, take, direction)?, 0)
            };
            let mut histogram = vec![0; scorer.model().config().classes];
            let position: std::collections::HashMap<usize, usize> =
                subset.iter().enumerate().map(|(i, &id)| (id, i)).collect();
            for id in &ids {
                histogram[predicted[position[id]]] += 1;
            }
            Ok(Acquisition {
                ids,
                refilled,
                predicted: Some(histogram),
            })
        }
    }
}

struct EvalContext<'a> {
    iteration: usize,
    labeled_count: usize,
    class_counts: Vec<usize>,
    acquisition: &'a Acquisition,
    cost: QueryCost,
    truncated: bool,
    train_loss: Option<f64>,
}

fn evaluate(scorer: &Scorer, eval: &EvalSets, config: &LoopConfig, ctx: EvalContext<'_>) -> Result<IterationReport> {
    let model = scorer.model();
    let labels = eval.test.require_labels()?;
    let probs = model.predict_proba(&eval.test)?;
    let mut per_shift = Vec::with_capacity(eval.shifted.len());
    for (spec, data) in &eval.shifted {
        let p = model.predict_proba(data)?;
        let y = data.require_labels()?;
        per_shift.push(ShiftResult {
            kind: spec.kind,
            intensity: spec.intensity,
            accuracy: metrics::accuracy(&p, y)?,
            ece: metrics::ece(&p, y, config.ece_bins)?,
        });
    }
    let errors: Vec<f64> = per_shift.iter().map(|s| 1.0 - s.accuracy).collect();
    let auroc_ood = match &eval.ood {
        Some(ood) => Some(metrics::auroc(&scorer.ood_scores(&eval.test)?, &scorer.ood_scores(ood)?)?),
        None => None,
    };
    let report = IterationReport {
        strategy: config.strategy.name().to_string(),
        seed: config.seed,
        iteration: ctx.iteration,
        labeled_count: ctx.labeled_count,
        accuracy: metrics::accuracy(&probs, labels)?,
        ece: metrics::ece(&probs, labels, config.ece_bins)?,
        nll: metrics::nll(&probs, labels)?,
        brier: metrics::brier(&probs, labels)?,
        sampling_bias: metrics::sampling_bias(&ctx.class_counts)?,
        auroc_ood,
        mce: if errors.is_empty() { None } else { Some(metrics::mce(&errors)?) },
        mce_normalization: "none".into(),
        per_shift,
        query_wall_ms: config.record_wall_time.then_some(ctx.cost.wall_ms),
        forward_passes_used: ctx.cost.forward_passes,
        class_counts: ctx.class_counts,
        acquired: ctx.acquisition.ids.len(),
        acquired_predicted: ctx.acquisition.predicted.clone(),
        refilled: ctx.acquisition.refilled,
        truncated: ctx.truncated,
        train_loss: ctx.train_loss,
    };
    report.validate()?;
    Ok(report)
}

/// Loop settings under `loop.*` keys.
pub fn write_loop_config(config: &LoopConfig, c: &mut FlatConfig) {
    c.set("loop.strategy", config.strategy.name());
    c.set("loop.budget", config.budget);
    c.set("loop.M", config.acquisition_size);
    c.set("loop.subset_size", config.subset_size);
    if let Some(loss) = config.loss {
        c.set("loop.loss", loss.name());
    }
    c.set("loop.seed", config.seed);
    c.set("loop.mc_passes", config.mc_passes);
    c.set("loop.feature_cache", config.feature_cache.name());
    c.set("loop.pca_target", pca_target_name(&config.pca));
    c.set("loop.pca_center", config.pca.center);
    c.set("loop.symmetric_featuresim", config.symmetric_featuresim);
    c.set("loop.ece_bins", config.ece_bins);
    c.set("loop.record_wall_time", config.record_wall_time);
}

pub fn read_loop_config(c: &FlatConfig, base: &LoopConfig) -> Result<LoopConfig> {
    let mut pca = base.pca;
    if let Some(t) = c.raw("loop.pca_target") {
        pca.target = parse_pca_target(t)?;
    }
    pca.center = c.get_or("loop.pca_center", pca.center)?;
    let loss = match c.raw("loop.loss") {
        Some(s) if s != "default" => Some(s.parse()?),
        Some(_) => None,
        None => base.loss,
    };
    let cfg = LoopConfig {
        strategy: c.get_or("loop.strategy", base.strategy)?,
        budget: c.get_or("loop.budget", base.budget)?,
        acquisition_size: c.get_or("loop.M", base.acquisition_size)?,
        subset_size: c.get_or("loop.subset_size", base.subset_size)?,
        loss,
        seed: c.get_or("loop.seed", base.seed)?,
        mc_passes: c.get_or("loop.mc_passes", base.mc_passes)?,
        feature_cache: c.get_or("loop.feature_cache", base.feature_cache)?,
        pca,
        symmetric_featuresim: c.get_or("loop.symmetric_featuresim", base.symmetric_featuresim)?,
        ece_bins: c.get_or("loop.ece_bins", base.ece_bins)?,
        record_wall_time: c.get_or("loop.record_wall_time", base.record_wall_time)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_mixture, generate_ood, DatasetSpec, ShiftKind};

    fn small_model(d: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            d_in: d,
            d_hidden: 16,
            d_feat: 8,
            d_proj: 8,
            classes,
            epochs: 4,
            batch_size: 32,
            lr_decay_epoch: None,
            classifier_steps: 50,
            ..ModelConfig::default()
        }
    }

    fn data(n_per_class: usize, seed: u64) -> FeatureMatrix {
        let spec = DatasetSpec {
            classes: 3,
            dim: 4,
            n_per_class,
            seed,
            ..DatasetSpec::default()
        };
        generate_mixture(&spec).unwrap()
    }

    fn eval_sets() -> EvalSets {
        let spec = DatasetSpec {
            classes: 3,
            dim: 4,
            n_per_class: 20,
            seed: 99,
            ..DatasetSpec::default()
        };
        EvalSets::new(data(20, 99))
            .unwrap()
            .with_shifts(&ShiftSpec::suite(&[ShiftKind::AdditiveGaussian], &[1, 3]), 5)
            .unwrap()
            .with_ood(generate_ood(&spec, 30, 7).unwrap())
            .unwrap()
    }

    #[test]
    fn pool_partition_and_history() {
        let mut pool = PoolState::new(6);
        pool.check_invariants().unwrap();
        pool.acquire(&[4, 1]).unwrap();
        pool.acquire(&[0]).unwrap();
        pool.check_invariants().unwrap();
        assert_eq!(pool.labeled_ids(), &[4, 1, 0]);
        assert_eq!(pool.unlabeled_ids(), &[2, 3, 5]);
        assert_eq!(pool.iteration(), 2);
        assert!(matches!(pool.acquire(&[1]), Err(Error::Selection(_))));
        assert!(matches!(pool.acquire(&[2, 2]), Err(Error::Selection(_))));
        assert!(matches!(pool.acquire(&[6]), Err(Error::UnknownId(6))));
        // failed acquisitions leave the state untouched
        assert_eq!(pool.iteration(), 2);
        pool.check_invariants().unwrap();
    }

    #[test]
    fn oracle_reveals_stored_labels() {
        let d = data(5, 1);
        let oracle = Oracle::new(&d).unwrap();
        let ids: Vec<usize> = (0..d.n()).collect();
        assert_eq!(oracle.label(&ids).unwrap(), d.labels().unwrap());
        assert_eq!(oracle.label(&[3, 3]).unwrap(), oracle.label(&[3, 3]).unwrap());
        assert!(matches!(oracle.label(&[d.n()]), Err(Error::UnknownId(_))));
    }

    #[test]
    fn config_validation() {
        let ok = LoopConfig::new(StrategyKind::Entropy, 100, 20, 40);
        ok.validate().unwrap();
        assert_eq!(ok.iterations(), 5);
        assert!(LoopConfig::new(StrategyKind::Entropy, 100, 30, 40).validate().is_err());
        assert!(LoopConfig::new(StrategyKind::Entropy, 100, 20, 10).validate().is_err());
        assert!(LoopConfig::new(StrategyKind::Entropy, 0, 20, 40).validate().is_err());
    }

    #[test]
    fn every_strategy_runs_with_bookkeeping_intact() {
        let pool = data(40, 3);
        let eval = eval_sets();
        for strategy in StrategyKind::ALL {
            let mut cfg = LoopConfig::new(strategy, 30, 10, 40);
            cfg.mc_passes = 4;
            let out = run_active_learning(&pool, &eval, &small_model(4, 3), &cfg).unwrap();
            assert_eq!(out.reports.len(), 3, "{strategy}");
            assert!(!out.truncated);
            out.pool.check_invariants().unwrap();
            for (t, r) in out.reports.iter().enumerate() {
                assert_eq!(r.labeled_count, (t + 1) * 10);
                assert_eq!(r.acquired, 10);
                assert_eq!(r.class_counts.iter().sum::<usize>(), r.labeled_count);
                assert!(r.auroc_ood.is_some());
                assert_eq!(r.per_shift.len(), 2);
                r.validate().unwrap();
            }
            assert_eq!(out.reports[0].forward_passes_used, 0);
            let later = out.reports[1].forward_passes_used;
            match strategy {
                StrategyKind::Random => assert_eq!(later, 0),
                StrategyKind::Bald => assert_eq!(later, 4 * 2),
                _ => assert_eq!(later, 2, "{strategy}"),
            }
            if strategy.is_scal() {
                for r in &out.reports[1..] {
                    let hist = r.acquired_predicted.as_ref().unwrap();
                    let quota = 10 / 3;
                    let deficit: usize = hist
                        .iter()
                        .enumerate()
                        .map(|(k, &c)| (quota + usize::from(k < 10 % 3)).saturating_sub(c))
                        .sum();
                    assert!(deficit <= r.refilled);
                }
            }
        }
    }

    #[test]
    fn runs_are_deterministic_per_seed() {
        let pool = data(30, 4);
        let eval = eval_sets();
        for strategy in [StrategyKind::Random, StrategyKind::Featuresim] {
            let mut cfg = LoopConfig::new(strategy, 30, 10, 30);
            cfg.seed = 11;
            let a = run_active_learning(&pool, &eval, &small_model(4, 3), &cfg).unwrap();
            let b = run_active_learning(&pool, &eval, &small_model(4, 3), &cfg).unwrap();
            assert_eq!(a.pool.history(), b.pool.history());
            assert_eq!(a.reports, b.reports);
            cfg.seed = 12;
            let c = run_active_learning(&pool, &eval, &small_model(4, 3), &cfg).unwrap();
            assert_ne!(a.pool.history(), c.pool.history());
        }
    }

    #[test]
    fn budget_equal_to_pool_labels_everything() {
        let pool = data(10, 5);
        let cfg = LoopConfig::new(StrategyKind::Entropy, 30, 10, 30);
        let out = run_active_learning(&pool, &eval_sets(), &small_model(4, 3), &cfg).unwrap();
        assert!(out.pool.unlabeled_ids().is_empty());
        assert_eq!(out.pool.labeled_ids().len(), 30);
        assert!(!out.truncated);
    }

    #[test]
    fn pool_exhaustion_truncates_the_last_iteration() {
        let pool = data(8, 6);
        let cfg = LoopConfig::new(StrategyKind::Fre, 40, 10, 10);
        let out = run_active_learning(&pool, &eval_sets(), &small_model(4, 3), &cfg).unwrap();
        assert!(out.truncated);
        let sizes: Vec<usize> = out.reports.iter().map(|r| r.acquired).collect();
        assert_eq!(sizes, vec![10, 10, 4]);
        assert!(out.reports.last().unwrap().truncated);
        assert!(out.reports[..2].iter().all(|r| !r.truncated));
        out.pool.check_invariants().unwrap();
    }

    #[test]
    fn oversized_subset_is_rejected() {
        let pool = data(5, 6);
        let cfg = LoopConfig::new(StrategyKind::Entropy, 10, 5, 100);
        let err = run_active_learning(&pool, &eval_sets(), &small_model(4, 3), &cfg).unwrap_err();
        assert!(err.is_config_error());
    }

    #[test]
    fn accumulate_mode_keeps_first_features() {
        let pool = data(30, 8);
        let mut cfg = LoopConfig::new(StrategyKind::Featuresim, 30, 10, 30);
        cfg.feature_cache = FeatureCache::Accumulate;
        let out = run_active_learning(&pool, &eval_sets(), &small_model(4, 3), &cfg).unwrap();
        let bank = out.scorer.labeled_features();
        assert_eq!(bank.n(), 30);
        let order: Vec<&String> = out.pool.labeled_ids().iter().map(|&i| &pool.ids()[i]).collect();
        assert_eq!(bank.ids().iter().collect::<Vec<_>>(), order);
        // the first batch was encoded by the first model, not the last
        let last = out.scorer.model().encode(&pool.select(&out.pool.history()[0])).unwrap();
        assert_ne!(&bank.values()[..last.values().len()], last.values());
    }

    #[test]
    fn scorer_round_trips_through_a_checkpoint() {
        let pool = data(30, 9);
        for strategy in [StrategyKind::Fre, StrategyKind::Featuresim, StrategyKind::Coreset] {
            let cfg = LoopConfig::new(strategy, 20, 10, 30);
            let out = run_active_learning(&pool, &eval_sets(), &small_model(4, 3), &cfg).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.bin");
            out.scorer.save(&path).unwrap();
            let back = Scorer::load(&path).unwrap();
            assert_eq!(back.strategy(), strategy);
            assert_eq!(back.ood_scores(&pool).unwrap(), out.scorer.ood_scores(&pool).unwrap());
        }
    }

    #[test]
    fn fre_falls_back_to_nearest_fitted_class() {
        let f = FeatureMatrix::with_generated_ids(
            2,
            vec![0.0, 0.0, 2.0, 0.0, 10.0, 10.0, 10.0, 12.0],
            Some(vec![0, 0, 2, 2]),
        )
        .unwrap();
        let pca = fit_class_pca(&f, 3, &PcaOptions::default()).unwrap();
        // class 1 is unfitted; class 0's line through the origin is closest
        let direct = pca.fre_score(&[1.0, 0.5], 0).unwrap();
        assert!((fre_with_fallback(&[1.0, 0.5], 1, &pca).unwrap() - direct).abs() < 1e-12);
        assert_eq!(fre_with_fallback(&[1.0, 0.5], 2, &pca).unwrap(), pca.fre_score(&[1.0, 0.5], 2).unwrap());
        let none = FeatureMatrix::empty(2).with_labels(Some(vec![])).unwrap();
        let empty = fit_class_pca(&none, 3, &PcaOptions::default()).unwrap();
        assert!(matches!(fre_with_fallback(&[0.0, 0.0], 1, &empty), Err(Error::Scoring(_))));
    }

    #[test]
    fn loop_config_round_trips() {
        let mut cfg = LoopConfig::new(StrategyKind::Bald, 500, 100, 2000);
        cfg.loss = Some(LossKind::Contrastive);
        cfg.feature_cache = FeatureCache::Accumulate;
        cfg.pca.target = crate::pca::ComponentTarget::Fixed(3);
        cfg.seed = 77;
        let mut c = FlatConfig::new();
        write_loop_config(&cfg, &mut c);
        let back = read_loop_config(&FlatConfig::parse(&c.render()).unwrap(), &LoopConfig::new(StrategyKind::Random, 10, 10, 10)).unwrap();
        assert_eq!(back, cfg);
    }
}
