//! Dense + BM25 score fusion and the fusion-weight grid search.
//!
//! Each arm is min-max normalized over the union of both candidate lists;
//! a candidate missing from an arm takes that arm's minimum, which maps to 0.
//! The fused score is `dense + α · sparse`.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::ranking::{Hit, RankedList, Run};

/// `{0.5, 0.6, …, 2.0}`.
pub fn alpha_grid() -> Vec<f64> {
    (5..=20).map(|i| i as f64 / 10.0).collect()
}

fn min_max(list: &RankedList) -> Option<(f64, f64)> {
    let mut it = list.hits().iter().map(|h| h.score);
    let first = it.next()?;
    Some(it.fold((first, first), |(lo, hi), s| (lo.min(s), hi.max(s))))
}

fn normalized(list: &RankedList) -> BTreeMap<usize, f64> {
    let Some((lo, hi)) = min_max(list) else {
        return BTreeMap::new();
    };
    let span = hi - lo;
    list.hits()
        .iter()
        .map(|h| {
            let v = if span > 0.0 {
                (h.score - lo) / span
            } else {
                0.0
            };
            (h.passage, v)
        })
        .collect()
}

/// Fuses two candidate lists and keeps the best `k`.
pub fn hybrid_rank(dense: &RankedList, sparse: &RankedList, alpha: f64, k: usize) -> RankedList {
    let nd = normalized(dense);
    let ns = normalized(sparse);
    let mut union: Vec<usize> = nd.keys().chain(ns.keys()).copied().collect();
    union.sort_unstable();
    union.dedup();
    let hits = union
        .into_iter()
        .map(|id| Hit {
            passage: id,
            score: nd.get(&id).copied().unwrap_or(0.0)
                + alpha * ns.get(&id).copied().unwrap_or(0.0),
        })
        .collect();
    RankedList::top_k(hits, k)
}

/// Fuses every query present in either run.
pub fn hybrid_run(dense: &Run, sparse: &Run, alpha: f64, k: usize) -> Run {
    let empty = RankedList::default();
    let mut qids: Vec<&String> = dense.lists.keys().chain(sparse.lists.keys()).collect();
    qids.sort();
    qids.dedup();
    let mut out = Run::new();
    for qid in qids {
        let d = dense.get(qid).unwrap_or(&empty);
        let s = sparse.get(qid).unwrap_or(&empty);
        out.insert(qid.clone(), hybrid_rank(d, s, alpha, k));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlphaSearch {
    pub alpha: f64,
    pub metric: f64,
    /// `(α, metric)` for every grid point, in grid order.
    pub grid: Vec<(f64, f64)>,
}

/// Evaluates `metric` on the fused dev run for every grid point and returns
/// the best; ties go to the smallest α.
pub fn tune_alpha<F>(dense: &Run, sparse: &Run, k: usize, metric: F) -> AlphaSearch
where
    F: Fn(&Run) -> f64 + Sync,
{
    let grid: Vec<(f64, f64)> = alpha_grid()
        .into_par_iter()
        .map(|a| (a, metric(&hybrid_run(dense, sparse, a, k))))
        .collect();
    let mut best = grid[0];
    for &(a, m) in &grid[1..] {
        if m > best.1 {
            best = (a, m);
        }
    }
    AlphaSearch {
        alpha: best.0,
        metric: best.1,
        grid,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list(pairs: &[(usize, f64)]) -> RankedList {
        RankedList::from_hits(
            pairs
                .iter()
                .map(|&(passage, score)| Hit { passage, score })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn grid_has_sixteen_points() {
        let g = alpha_grid();
        assert_eq!(g.len(), 16);
        assert_eq!(g[0], 0.5);
        assert_eq!(g[15], 2.0);
        assert!(g.windows(2).all(|w| ((w[1] - w[0]) - 0.1).abs() < 1e-12));
    }

    #[test]
    fn hand_normalized_tie() {
        let dense = list(&[(0, 2.0), (1, 1.0)]);
        let sparse = list(&[(0, 0.0), (1, 3.0)]);
        let fused = hybrid_rank(&dense, &sparse, 1.0, 2);
        assert_eq!(fused.ids().collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(fused.hits()[0].score, 1.0);
        assert_eq!(fused.hits()[1].score, 1.0);
    }

    #[test]
    fn alpha_zero_is_dense_order_on_union() {
        let dense = list(&[(3, 0.9), (1, 0.5), (7, 0.1)]);
        let sparse = list(&[(2, 4.0), (3, 1.0)]);
        let fused = hybrid_rank(&dense, &sparse, 0.0, 10);
        // 2 is missing from the dense arm and ties with 7 at 0
        assert_eq!(fused.ids().collect::<Vec<_>>(), vec![3, 1, 2, 7]);
    }

    #[test]
    fn identical_arms_preserve_order() {
        let l = list(&[(4, 3.0), (2, 2.0), (9, 1.0), (1, 0.0)]);
        for a in [0.0, 0.5, 1.3, 2.0, 10.0] {
            let fused = hybrid_rank(&l, &l, a, 4);
            assert_eq!(fused.ids().collect::<Vec<_>>(), vec![4, 2, 9, 1]);
        }
    }

    #[test]
    fn constant_scores_normalize_to_zero() {
        let n = normalized(&list(&[(0, 5.0), (1, 5.0)]));
        assert!(n.values().all(|&v| v == 0.0));
        assert!(hybrid_rank(&RankedList::default(), &RankedList::default(), 1.0, 3).is_empty());
    }

    #[test]
    fn constant_metric_picks_smallest_alpha() {
        let run = Run::new();
        let s = tune_alpha(&run, &run, 5, |_| 0.25);
        assert_eq!(s.alpha, 0.5);
        assert_eq!(s.grid.len(), 16);
    }
}
