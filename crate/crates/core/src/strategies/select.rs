use std::cmp::Ordering;

use rand::seq::index;

use super::{Direction, StrategyKind};
use crate::datasets::FeatureMatrix;
use crate::error::{Error, Result};
use crate::rng::{self, streams};

/// A scored pool sample. `sample_id` is the sample's row index in the
/// universe and doubles as the tie-break key.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredCandidate {
    pub sample_id: usize,
    pub predicted: usize,
    pub score: f64,
    pub strategy: StrategyKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectionRequest {
    pub m: usize,
    pub classes: usize,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Selection {
    pub ids: Vec<usize>,
    /// Picks made from the global ranking because some class had fewer
    /// candidates than its quota.
    pub refilled: usize,
}

/// Best-first order: by score in the requested direction, then ascending id.
fn rank(a: &ScoredCandidate, b: &ScoredCandidate, direction: Direction) -> Ordering {
    let by_score = match direction {
        Direction::SelectMax => b.score.total_cmp(&a.score),
        Direction::SelectMin => a.score.total_cmp(&b.score),
    };
    by_score.then(a.sample_id.cmp(&b.sample_id))
}

fn check_scores(candidates: &[ScoredCandidate]) -> Result<()> {
    match candidates.iter().find(|c| !c.score.is_finite()) {
        Some(c) => Err(Error::Scoring(format!("sample {} has non-finite score {}", c.sample_id, c.score))),
        None => Ok(()),
    }
}

/// Global top-`m` in the given direction.
pub fn select_top(candidates: &[ScoredCandidate], m: usize, direction: Direction) -> Result<Vec<usize>> {
    check_scores(candidates)?;
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| rank(a, b, direction));
    Ok(sorted.iter().take(m).map(|c| c.sample_id).collect())
}

/// Balanced selection over predicted classes.
///
/// Each class gets `floor(m/K)` slots and the remaining `m mod K` slots go one
/// each to the lowest class indices. Within a class the best-ranked
/// candidates fill its slots; slots a class cannot fill are handed to the
/// best-ranked leftovers across all classes.
pub fn select_per_class(candidates: &[ScoredCandidate], request: &SelectionRequest) -> Result<Selection> {
    check_scores(candidates)?;
    if candidates.is_empty() {
        log::warn!("no candidates to select from");
        return Ok(Selection::default());
    }
    if request.classes == 0 {
        return Err(Error::Config("class count must be positive".into()));
    }
    if let Some(c) = candidates.iter().find(|c| c.predicted >= request.classes) {
        return Err(Error::Scoring(format!(
            "sample {} predicted class {} outside [0, {})",
            c.sample_id, c.predicted, request.classes
        )));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| rank(a, b, request.direction));
    let base = request.m / request.classes;
    let extra = request.m % request.classes;
    let mut quota: Vec<usize> = (0..request.classes).map(|k| base + usize::from(k < extra)).collect();
    let mut taken = vec![false; sorted.len()];
    let mut ids = Vec::with_capacity(request.m);
    for (i, c) in sorted.iter().enumerate() {
        if quota[c.predicted] > 0 {
            quota[c.predicted] -= 1;
            taken[i] = true;
            ids.push(c.sample_id);
        }
    }
    let target = request.m.min(sorted.len());
    let before = ids.len();
    for (i, c) in sorted.iter().enumerate() {
        if ids.len() >= target {
            break;
        }
        if !taken[i] {
            ids.push(c.sample_id);
        }
    }
    Ok(Selection {
        refilled: ids.len() - before,
        ids,
    })
}

/// `m` ids drawn uniformly without replacement.
pub fn select_random(ids: &[usize], m: usize, seed: u64) -> Result<Vec<usize>> {
    if m > ids.len() {
        return Err(Error::Selection(format!("cannot draw {m} of {} ids", ids.len())));
    }
    let mut rng = rng::stream(seed, streams::ACQUIRE);
    Ok(index::sample(&mut rng, ids.len(), m).into_iter().map(|i| ids[i]).collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Farthest-first traversal.
///
/// Labeled features seed the center set; each step picks the unlabeled point
/// farthest from its nearest center (ties to the smaller id). With no labeled
/// seeds the first pick is the point farthest from the unlabeled mean.
pub fn select_kcenter_greedy(
    unlabeled: &FeatureMatrix,
    unlabeled_ids: &[usize],
    labeled: &FeatureMatrix,
    m: usize,
) -> Result<Vec<usize>> {
    let n = unlabeled.n();
    if unlabeled_ids.len() != n {
        return Err(Error::shape(format!("{n} ids"), unlabeled_ids.len()));
    }
    if m > n {
        return Err(Error::Selection(format!("cannot pick {m} centers from {n} points")));
    }
    if !labeled.is_empty() && labeled.d() != unlabeled.d() {
        return Err(Error::shape(format!("labeled dimension {}", unlabeled.d()), labeled.d()));
    }
    let mut nearest = vec![f64::INFINITY; n];
    for center in labeled.rows() {
        for (i, row) in unlabeled.rows().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(row, center));
        }
    }
    if labeled.is_empty() && n > 0 {
        let d = unlabeled.d();
        let mut mean = vec![0.0; d];
        for row in unlabeled.rows() {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
        }
        for (i, row) in unlabeled.rows().enumerate() {
            nearest[i] = sq_dist(row, &mean);
        }
    }
    let mut chosen = Vec::with_capacity(m);
    let mut picked = vec![false; n];
    for step in 0..m {
        let mut best: Option<usize> = None;
        for i in (0..n).filter(|&i| !picked[i]) {
            best = match best {
                None => Some(i),
                Some(b) if nearest[i] > nearest[b] || (nearest[i] == nearest[b] && unlabeled_ids[i] < unlabeled_ids[b]) => Some(i),
                keep => keep,
            };
        }
        let Some(b) = best else { break };
        picked[b] = true;
        chosen.push(unlabeled_ids[b]);
        if step == 0 && labeled.is_empty() {
            nearest.iter_mut().for_each(|v| *v = f64::INFINITY);
        }
        let center = unlabeled.row(b).to_vec();
        for (i, row) in unlabeled.rows().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(row, &center));
        }
    }
    Ok(chosen)
}

/// Largest distance from any point to its nearest center.
pub fn coverage_radius<'a>(points: impl IntoIterator<Item = &'a [f64]>, centers: &[&[f64]]) -> f64 {
    points
        .into_iter()
        .map(|p| {
            centers
                .iter()
                .map(|c| sq_dist(p, c))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn cand(id: usize, class: usize, score: f64) -> ScoredCandidate {
        ScoredCandidate {
            sample_id: id,
            predicted: class,
            score,
            strategy: StrategyKind::Featuresim,
        }
    }

    fn request(m: usize, classes: usize) -> SelectionRequest {
        SelectionRequest { m, classes, direction: Direction::SelectMin }
    }

    #[test]
    fn one_per_class() {
        let cands: Vec<_> = (0..30).map(|i| cand(i, i % 10, (i * 37 % 11) as f64)).collect();
        let sel = select_per_class(&cands, &request(10, 10)).unwrap();
        assert_eq!(sel.ids.len(), 10);
        let mut classes: Vec<_> = sel.ids.iter().map(|&id| id % 10).collect();
        classes.sort();
        assert_eq!(classes, (0..10).collect::<Vec<_>>());
        assert_eq!(sel.refilled, 0);
    }

    #[test]
    fn deficit_is_refilled() {
        let mut cands = vec![cand(0, 0, 1.0)];
        cands.extend((1..11).map(|i| cand(i, 1, i as f64)));
        let sel = select_per_class(&cands, &request(4, 2)).unwrap();
        assert_eq!(sel.ids, vec![0, 1, 2, 3]);
        assert_eq!(sel.refilled, 1);
    }

    #[test]
    fn ties_prefer_lower_id() {
        let cands = vec![cand(9, 0, 0.5), cand(4, 0, 0.5)];
        let sel = select_per_class(&cands, &request(1, 1)).unwrap();
        assert_eq!(sel.ids, vec![4]);
    }

    #[test]
    fn remainder_goes_to_low_classes() {
        let cands: Vec<_> = (0..40).map(|i| cand(i, i % 4, i as f64)).collect();
        let sel = select_per_class(&cands, &request(6, 4)).unwrap();
        let count = |k| sel.ids.iter().filter(|&&id| id % 4 == k).count();
        assert_eq!((count(0), count(1), count(2), count(3)), (2, 2, 1, 1));
    }

    #[test]
    fn empty_and_short_pools() {
        assert_eq!(select_per_class(&[], &request(5, 2)).unwrap(), Selection::default());
        let sel = select_per_class(&[cand(1, 0, 0.0), cand(2, 1, 0.0)], &request(5, 2)).unwrap();
        assert_eq!(sel.ids.len(), 2);
    }

    #[test]
    fn non_finite_scores_rejected() {
        assert!(select_per_class(&[cand(1, 0, f64::NAN)], &request(1, 1)).is_err());
    }

    #[test]
    fn top_m_direction() {
        let cands = vec![cand(0, 0, 1.0), cand(1, 0, 3.0), cand(2, 0, 2.0)];
        assert_eq!(select_top(&cands, 2, Direction::SelectMax).unwrap(), vec![1, 2]);
        assert_eq!(select_top(&cands, 2, Direction::SelectMin).unwrap(), vec![0, 2]);
    }

    fn points(rows: &[f64]) -> FeatureMatrix {
        FeatureMatrix::with_generated_ids(1, rows.to_vec(), None).unwrap()
    }

    #[test]
    fn kcenter_picks_farthest() {
        let pool = points(&[1.0, 2.0, 10.0]);
        let picks = select_kcenter_greedy(&pool, &[1, 2, 3], &points(&[0.0]), 1).unwrap();
        assert_eq!(picks, vec![3]);
    }

    #[test]
    fn kcenter_takes_everything_when_m_is_n() {
        let pool = points(&[1.0, 2.0, 10.0, 10.0]);
        let mut picks = select_kcenter_greedy(&pool, &[4, 5, 6, 7], &points(&[0.0]), 4).unwrap();
        picks.sort();
        assert_eq!(picks, vec![4, 5, 6, 7]);
        assert!(select_kcenter_greedy(&pool, &[4, 5, 6, 7], &points(&[0.0]), 5).is_err());
    }

    #[test]
    fn kcenter_without_seeds_starts_far_from_mean() {
        let pool = points(&[0.0, 1.0, 2.0, 9.0]);
        let picks = select_kcenter_greedy(&pool, &[0, 1, 2, 3], &FeatureMatrix::empty(1), 2).unwrap();
        assert_eq!(picks, vec![3, 0]);
    }

    #[test]
    fn random_is_seeded_and_complete() {
        let ids: Vec<usize> = (10..20).collect();
        let a = select_random(&ids, 4, 7).unwrap();
        assert_eq!(a, select_random(&ids, 4, 7).unwrap());
        let mut all = select_random(&ids, 10, 1).unwrap();
        all.sort();
        assert_eq!(all, ids);
        assert!(select_random(&ids, 11, 0).is_err());
    }

    #[test]
    fn random_is_uniform() {
        // 10^4 draws of 1 from 10: each count ~ Binomial(10^4, 0.1), sd = 30
        let ids: Vec<usize> = (0..10).collect();
        let mut counts = [0usize; 10];
        for seed in 0..10_000u64 {
            counts[select_random(&ids, 1, seed).unwrap()[0]] += 1;
        }
        for c in counts {
            assert!((c as f64 - 1000.0).abs() <= 90.0, "{counts:?}");
        }
    }

    proptest! {
        #[test]
        fn per_class_invariants(
            scores in prop::collection::vec((0usize..5, -5.0f64..5.0), 0..60),
            m in 0usize..30,
        ) {
            let cands: Vec<_> = scores.iter().enumerate().map(|(i, &(k, s))| cand(i, k, s)).collect();
            let sel = select_per_class(&cands, &request(m, 5)).unwrap();
            prop_assert_eq!(sel.ids.len(), m.min(cands.len()));
            let unique: HashSet<_> = sel.ids.iter().collect();
            prop_assert_eq!(unique.len(), sel.ids.len());
            for k in 0..5 {
                let n = sel.ids.iter().filter(|&&id| cands[id].predicted == k).count();
                prop_assert!(n <= m.div_ceil(5) + sel.refilled);
            }
        }

        #[test]
        fn kcenter_ignores_row_order(values in prop::collection::vec(-10.0f64..10.0, 2..15), m in 1usize..5) {
            let m = m.min(values.len());
            let ids: Vec<usize> = (0..values.len()).collect();
            let forward = select_kcenter_greedy(&points(&values), &ids, &points(&[0.5]), m).unwrap();
            let rev_vals: Vec<f64> = values.iter().rev().copied().collect();
            let rev_ids: Vec<usize> = ids.iter().rev().copied().collect();
            let backward = select_kcenter_greedy(&points(&rev_vals), &rev_ids, &points(&[0.5]), m).unwrap();
            prop_assert_eq!(forward, backward);
        }
    }
}
