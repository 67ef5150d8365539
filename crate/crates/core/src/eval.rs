//! Sampled ranking evaluation: one positive against sampled negatives.

use std::collections::HashSet;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("candidate {0} appears more than once")]
    DuplicateCandidate(u32),
    #[error("expected {expected} scores, got {got}")]
    ScoreCount { expected: usize, got: usize },
    #[error("score for candidate {0} is not finite")]
    NonFiniteScore(u32),
    #[error("metric over an empty result set")]
    Empty,
    #[error("k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Model(#[from] crate::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankingResult {
    pub user: u32,
    pub positive: u32,
    /// 1-based position of the positive among all candidates.
    pub rank: usize,
    pub candidates: usize,
}

/// Rank the positive among `positive ++ negatives`. The positive's rank is one
/// plus the number of negatives scoring strictly higher, so ties never push
/// it down.
pub fn rank_candidates<F>(user: u32, positive: u32, negatives: &[u32], score: F) -> Result<RankingResult, EvalError>
where
    F: FnOnce(&[u32]) -> crate::Result<Vec<f64>>,
{
    let mut candidates = Vec::with_capacity(negatives.len() + 1);
    candidates.push(positive);
    candidates.extend_from_slice(negatives);
    let mut seen = HashSet::with_capacity(candidates.len());
    for &c in &candidates {
        if !seen.insert(c) {
            return Err(EvalError::DuplicateCandidate(c));
        }
    }
    let scores = score(&candidates)?;
    rank_from_scores(user, &candidates, &scores)
}

/// Same as [`rank_candidates`] for precomputed scores; `candidates[0]` is the positive.
pub fn rank_from_scores(user: u32, candidates: &[u32], scores: &[f64]) -> Result<RankingResult, EvalError> {
    if scores.len() != candidates.len() {
        return Err(EvalError::ScoreCount {
            expected: candidates.len(),
            got: scores.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore(candidates[i]));
    }
    let pos = scores[0];
    let above = scores[1..].iter().filter(|&&s| s > pos).count();
    Ok(RankingResult {
        user,
        positive: candidates[0],
        rank: 1 + above,
        candidates: candidates.len(),
    })
}

fn check(results: &[RankingResult]) -> Result<(), EvalError> {
    if results.is_empty() {
        Err(EvalError::Empty)
    } else {
        Ok(())
    }
}

pub fn hr_at_k(results: &[RankingResult], k: usize) -> Result<f64, EvalError> {
    check(results)?;
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let hits = results.iter().filter(|r| r.rank <= k).count();
    Ok(hits as f64 / results.len() as f64)
}

/// Per-result term `(2^[P<=k] - 1) / log2(P + 1)`, averaged.
pub fn ndcg_at_k(results: &[RankingResult], k: usize) -> Result<f64, EvalError> {
    check(results)?;
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let total: f64 = results
        .iter()
        .map(|r| {
            if r.rank <= k {
                1.0 / ((r.rank + 1) as f64).log2()
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / results.len() as f64)
}

pub fn mrr(results: &[RankingResult]) -> Result<f64, EvalError> {
    check(results)?;
    let total: f64 = results.iter().map(|r| 1.0 / r.rank as f64).sum();
    Ok(total / results.len() as f64)
}

/// Context for the `j`-th (0-based) test item under the fast protocol:
/// the fast-phase items followed by the test items already seen.
pub fn fast_test_context(fast: &[u32], test: &[u32], j: usize) -> Vec<u32> {
    let mut ctx = fast.to_vec();
    ctx.extend_from_slice(&test[..j]);
    ctx
}

/// The slow protocol scores every test item from the (most recent
/// `max_history` items of the) slow-phase sequence.
pub fn slow_test_context(slow: &[u32], max_history: usize) -> Vec<u32> {
    slow[slow.len().saturating_sub(max_history)..].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn at(rank: usize) -> RankingResult {
        RankingResult {
            user: 0,
            positive: 0,
            rank,
            candidates: 101,
        }
    }

    fn ranks(r: &[usize]) -> Vec<RankingResult> {
        r.iter().map(|&p| at(p)).collect()
    }

    fn scorer(scores: Vec<f64>) -> impl FnOnce(&[u32]) -> crate::Result<Vec<f64>> {
        move |_| Ok(scores)
    }

    #[test]
    fn highest_and_lowest() {
        let negs: Vec<u32> = (1..=100).collect();
        let mut s = vec![0.5; 101];
        s[0] = 0.9;
        assert_eq!(rank_candidates(0, 0, &negs, scorer(s.clone())).unwrap().rank, 1);
        s[0] = 0.1;
        assert_eq!(rank_candidates(0, 0, &negs, scorer(s)).unwrap().rank, 101);
    }

    #[test]
    fn ties_do_not_demote_positive() {
        let r = rank_candidates(0, 50, &[1, 2, 3], scorer(vec![0.5, 0.5, 0.7, 0.5])).unwrap();
        assert_eq!(r.rank, 2);
    }

    #[test]
    fn duplicates_rejected() {
        let err = rank_candidates(0, 3, &[1, 3], scorer(vec![0.0; 3])).unwrap_err();
        assert_eq!(err, EvalError::DuplicateCandidate(3));
    }

    #[test]
    fn closed_forms() {
        assert_eq!(hr_at_k(&ranks(&[1, 1]), 5).unwrap(), 1.0);
        assert_eq!(hr_at_k(&ranks(&[3, 7]), 5).unwrap(), 0.5);
        assert_eq!(ndcg_at_k(&ranks(&[1]), 5).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&ranks(&[3]), 3).unwrap(), 0.5);
        assert_eq!(ndcg_at_k(&ranks(&[6]), 5).unwrap(), 0.0);
        assert_eq!(mrr(&ranks(&[1, 1])).unwrap(), 1.0);
        assert_eq!(mrr(&ranks(&[1, 4])).unwrap(), 0.625);
    }

    #[test]
    fn empty_and_zero_k() {
        assert_eq!(hr_at_k(&[], 5), Err(EvalError::Empty));
        assert_eq!(mrr(&[]), Err(EvalError::Empty));
        assert_eq!(ndcg_at_k(&ranks(&[1]), 0), Err(EvalError::ZeroK));
    }

    #[test]
    fn protocol_contexts() {
        let fast = [10, 11, 12, 13, 14];
        let test = [20, 21, 22, 23, 24];
        for j in 0..5 {
            let ctx = fast_test_context(&fast, &test, j);
            assert_eq!(ctx.len(), 5 + j);
            assert_eq!(&ctx[5..], &test[..j]);
        }
        let slow: Vec<u32> = (0..60).collect();
        let ctx = slow_test_context(&slow, 50);
        assert_eq!(ctx, (10..60).collect::<Vec<u32>>());
        assert_eq!(slow_test_context(&slow[..3], 50), vec![0, 1, 2]);
    }

    proptest! {
        #[test]
        fn invariants(ps in proptest::collection::vec(1usize..=101, 1..50)) {
            let rs = ranks(&ps);
            let mut prev = 0.0;
            for k in 1..=101 {
                let hr = hr_at_k(&rs, k).unwrap();
                prop_assert!(hr >= prev);
                prop_assert!(ndcg_at_k(&rs, k).unwrap() <= hr + 1e-15);
                prev = hr;
            }
            prop_assert_eq!(hr_at_k(&rs, 101).unwrap(), 1.0);
            let m = mrr(&rs).unwrap();
            prop_assert!(m >= hr_at_k(&rs, 1).unwrap() && m <= 1.0);
        }

        #[test]
        fn monotone_transforms_keep_rank(scores in proptest::collection::vec(-5.0f64..5.0, 101)) {
            let cands: Vec<u32> = (0..101).collect();
            let base = rank_from_scores(0, &cands, &scores).unwrap();
            let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s - 7.0).collect();
            prop_assert_eq!(rank_from_scores(0, &cands, &exp).unwrap(), base);
            prop_assert_eq!(rank_from_scores(0, &cands, &affine).unwrap(), base);
        }
    }
}
