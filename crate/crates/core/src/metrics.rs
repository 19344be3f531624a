//! Ranking and classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ROC-AUC via the Mann–Whitney statistic with average ranks for ties, which
/// counts a tied positive/negative pair as one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::AucUndefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the rank sum keeps tied (half-integer) ranks exact.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the average (i + j + 2) / 2
        let twice_avg = (i + j + 2) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        twice_rank_sum += twice_avg * pos_in_group;
        i = j + 1;
    }
    let (p, n) = (positives as u64, negatives as u64);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankResult {
    pub rank: usize,
    pub candidate_count: usize,
}

impl RankResult {
    pub fn reciprocal(&self) -> f64 {
        1.0 / self.rank as f64
    }
}

/// Rank of `positive` among `candidates`, with ties counted against the
/// positive. `positive` is the candidate holding the true destination.
pub fn rank_against_negatives<C: PartialEq>(
    score: impl Fn(&C) -> f64,
    positive: &C,
    candidates: &[C],
) -> Result<RankResult> {
    if candidates.is_empty() {
        return Err(Error::Invalid("empty candidate set".into()));
    }
    let target = score(positive);
    let mut ahead = 0;
    let mut seen_positive = false;
    for c in candidates {
        if c == positive && !seen_positive {
            seen_positive = true;
            continue;
        }
        if score(c) >= target {
            ahead += 1;
        }
    }
    Ok(RankResult { rank: 1 + ahead, candidate_count: candidates.len() })
}

/// Rank of `positive_score` within a precomputed score vector that already
/// contains it at `positive_index`.
pub fn rank_in_scores(scores: &[f64], positive_index: usize) -> RankResult {
    let target = scores[positive_index];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != positive_index && s >= target)
        .count();
    RankResult { rank: 1 + ahead, candidate_count: scores.len() }
}

pub fn mrr(ranks: &[RankResult]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Invalid("no ranks".into()));
    }
    Ok(ranks.iter().map(RankResult::reciprocal).sum::<f64>() / ranks.len() as f64)
}

pub fn recall_at_k(ranks: &[RankResult], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Invalid("no ranks".into()));
    }
    Ok(ranks.iter().filter(|r| r.rank <= k).count() as f64 / ranks.len() as f64)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if si > sj {
                        wins += 1.0;
                    } else if si == sj {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_cases() {
        assert_eq!(roc_auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::AucUndefined)));
    }

    #[test]
    fn rank_cases() {
        let s = |c: &f64| *c;
        assert_eq!(rank_against_negatives(s, &0.9, &[0.9, 0.1, 0.5]).unwrap().rank, 1);
        assert_eq!(rank_against_negatives(s, &0.5, &[0.5, 0.5, 0.1]).unwrap().rank, 2);
        let r = rank_against_negatives(s, &0.5, &[0.5, 0.7, 0.1]).unwrap();
        assert_eq!(r.reciprocal(), 0.5);
        assert_eq!(r.candidate_count, 3);
        assert!(rank_against_negatives(s, &0.5, &[]).is_err());
        assert_eq!(rank_in_scores(&[0.2, 0.5, 0.5], 1).rank, 2);
    }

    #[test]
    fn mrr_and_recall_cases() {
        let r = |rank| RankResult { rank, candidate_count: 20 };
        assert_eq!(mrr(&[r(1)]).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[r(1)], 10).unwrap(), 1.0);
        assert_eq!(mrr(&[r(2), r(2)]).unwrap(), 0.5);
        assert_eq!(recall_at_k(&[r(11)], 10).unwrap(), 0.0);
        assert_eq!(recall_at_k(&[r(10)], 10).unwrap(), 1.0);
        assert!(mrr(&[]).is_err());
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_oracle(
            points in proptest::collection::vec((0u8..20, 0u8..2), 2..200),
        ) {
            let scores: Vec<f64> = points.iter().map(|p| f64::from(p.0) / 7.0).collect();
            let labels: Vec<u8> = points.iter().map(|p| p.1).collect();
            let pos = labels.iter().filter(|&&l| l == 1).count();
            prop_assume!(pos > 0 && pos < labels.len());
            prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), pairwise_auc(&scores, &labels));
        }

        #[test]
        fn ranks_invariant_under_monotone_transform(
            scores in proptest::collection::vec(-5.0f64..5.0, 2..50),
            pick in 0usize..50,
        ) {
            let idx = pick % scores.len();
            let a = rank_in_scores(&scores, idx);
            let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
            let b = rank_in_scores(&mapped, idx);
            prop_assert_eq!(a, b);
            let optimistic = 1 + scores.iter().enumerate()
                .filter(|&(i, &s)| i != idx && s > scores[idx]).count();
            prop_assert!(a.rank >= optimistic);
        }
    }
}
