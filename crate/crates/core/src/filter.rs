//! Probability/rank head filter.
//!
//! A token survives when it is both close enough to the most probable token
//! (`P(x) >= alpha * max P`) and inside the top-k (`P(x) >= P(rank k)`, ties
//! at rank k included). Tokens that fail are dropped from the masked
//! distribution rather than carried as `-inf`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::token_space::{Origin, TokenDistribution, TokenId};

pub const DEFAULT_ALPHA: f64 = 0.0005;
pub const DEFAULT_K: usize = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("empty distribution")]
    EmptyDistribution,
    #[error("alpha must lie in (0, 1], got {0}")]
    AlphaOutOfRange(f64),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("slice too short for rank filter: {len} entries, k = {k}")]
    SliceTooShort { len: usize, k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub alpha: f64,
    pub k: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            k: DEFAULT_K,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        check_alpha(self.alpha)?;
        if self.k == 0 {
            return Err(FilterError::ZeroK);
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<(), FilterError> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(FilterError::AlphaOutOfRange(alpha))
    }
}

/// Tokens that passed both filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSet {
    /// In distribution order (descending probability).
    pub members: Vec<TokenId>,
    pub threshold_prob: f64,
    pub kth_prob: f64,
}

impl HeadSet {
    pub fn contains(&self, token: TokenId) -> bool {
        self.members.contains(&token)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

pub fn probabilistic_filter(
    dist: &TokenDistribution,
    alpha: f64,
) -> Result<BTreeSet<TokenId>, FilterError> {
    check_alpha(alpha)?;
    if dist.is_empty() {
        return Err(FilterError::EmptyDistribution);
    }
    let threshold = alpha * dist.max_prob();
    Ok(dist
        .entries()
        .iter()
        .filter(|e| e.prob >= threshold)
        .map(|e| e.token)
        .collect())
}

fn kth_prob(dist: &TokenDistribution, k: usize) -> f64 {
    let idx = k.min(dist.len()) - 1;
    dist.entries()[idx].prob
}

pub fn rank_filter(dist: &TokenDistribution, k: usize) -> Result<BTreeSet<TokenId>, FilterError> {
    if k == 0 {
        return Err(FilterError::ZeroK);
    }
    if dist.is_empty() {
        return Err(FilterError::EmptyDistribution);
    }
    let cut = kth_prob(dist, k);
    Ok(dist
        .entries()
        .iter()
        .filter(|e| e.prob >= cut)
        .map(|e| e.token)
        .collect())
}

/// Intersection of the probabilistic and rank filters.
///
/// On a top slice the rank cut is only meaningful when the slice holds at
/// least `k` entries; shorter slices are rejected.
pub fn head_filter(dist: &TokenDistribution, cfg: &FilterConfig) -> Result<HeadSet, FilterError> {
    cfg.validate()?;
    if dist.is_empty() {
        return Err(FilterError::EmptyDistribution);
    }
    if dist.origin() == Origin::TopSlice && dist.len() < cfg.k {
        return Err(FilterError::SliceTooShort {
            len: dist.len(),
            k: cfg.k,
        });
    }
    let threshold_prob = cfg.alpha * dist.max_prob();
    let kth = kth_prob(dist, cfg.k);
    let cut = threshold_prob.max(kth);
    // Entries are sorted, so survivors form a prefix.
    let members = dist
        .entries()
        .iter()
        .take_while(|e| e.prob >= cut)
        .map(|e| e.token)
        .collect();
    Ok(HeadSet {
        members,
        threshold_prob,
        kth_prob: kth,
    })
}

/// Restricts `dist` to the head members, keeping original probabilities.
pub fn mask_distribution(dist: &TokenDistribution, head: &HeadSet) -> TokenDistribution {
    dist.restrict(|e| head.contains(e.token))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token_space::{top_slice, TokenEntry};
    use proptest::prelude::*;

    fn dist(probs: &[(&str, f64)], origin: Origin) -> TokenDistribution {
        let entries = probs
            .iter()
            .enumerate()
            .map(|(i, (p, prob))| TokenEntry::new(i as u32, p, *prob))
            .collect();
        TokenDistribution::from_unsorted(entries, origin).unwrap()
    }

    fn ids(set: &BTreeSet<TokenId>) -> Vec<u32> {
        set.iter().map(|t| t.0).collect()
    }

    fn abcd() -> TokenDistribution {
        dist(
            &[("a", 0.7), ("b", 0.2), ("c", 0.06), ("d", 0.04)],
            Origin::FullVocabulary,
        )
    }

    #[test]
    fn probabilistic_examples() {
        assert_eq!(ids(&probabilistic_filter(&abcd(), 0.1).unwrap()), [0, 1]);
        assert_eq!(ids(&probabilistic_filter(&abcd(), 1.0).unwrap()), [0]);
        let tie = dist(&[("a", 0.5), ("b", 0.5)], Origin::FullVocabulary);
        assert_eq!(ids(&probabilistic_filter(&tie, 1.0).unwrap()), [0, 1]);
        assert_eq!(
            probabilistic_filter(&abcd(), 0.0),
            Err(FilterError::AlphaOutOfRange(0.0))
        );
        assert!(probabilistic_filter(&abcd(), 1.5).is_err());
    }

    #[test]
    fn rank_examples() {
        assert_eq!(ids(&rank_filter(&abcd(), 3).unwrap()), [0, 1, 2]);
        assert_eq!(ids(&rank_filter(&abcd(), 1).unwrap()), [0]);
        let tie = dist(&[("a", 0.4), ("b", 0.3), ("c", 0.3)], Origin::FullVocabulary);
        assert_eq!(ids(&rank_filter(&tie, 2).unwrap()), [0, 1, 2]);
        assert_eq!(ids(&rank_filter(&abcd(), 99).unwrap()), [0, 1, 2, 3]);
        assert_eq!(rank_filter(&abcd(), 0), Err(FilterError::ZeroK));
    }

    #[test]
    fn head_examples() {
        let cfg = FilterConfig { alpha: 0.1, k: 3 };
        let head = head_filter(&abcd(), &cfg).unwrap();
        assert_eq!(head.members, [TokenId(0), TokenId(1)]);
        assert!((head.threshold_prob - 0.07).abs() < 1e-12);
        assert_eq!(head.kth_prob, 0.06);

        let cfg = FilterConfig { alpha: 1e-12, k: 4 };
        assert_eq!(head_filter(&abcd(), &cfg).unwrap().len(), 4);

        // threshold 0.0005 * 0.9 = 0.00045 excludes b (0.0004) and the tail
        let mut probs = vec![("a", 0.9), ("b", 0.0004)];
        for p in ["c", "d", "e", "f", "g", "h", "i", "j"] {
            probs.push((p, 0.0003));
        }
        let d = dist(&probs, Origin::TopSlice);
        let head = head_filter(&d, &FilterConfig::default()).unwrap();
        assert_eq!(head.members, [TokenId(0)]);
    }

    #[test]
    fn short_slice_is_rejected() {
        let d = dist(&[("a", 0.6), ("b", 0.3)], Origin::TopSlice);
        assert_eq!(
            head_filter(&d, &FilterConfig::default()),
            Err(FilterError::SliceTooShort { len: 2, k: 10 })
        );
        let full = dist(&[("a", 0.6), ("b", 0.4)], Origin::FullVocabulary);
        assert_eq!(head_filter(&full, &FilterConfig::default()).unwrap().len(), 2);
    }

    #[test]
    fn mask_examples() {
        let d = dist(&[("a", 0.7), ("b", 0.2), ("c", 0.1)], Origin::FullVocabulary);
        let head = HeadSet {
            members: vec![TokenId(0), TokenId(1)],
            threshold_prob: 0.0,
            kth_prob: 0.0,
        };
        let m = mask_distribution(&d, &head);
        assert_eq!(m.len(), 2);
        assert_eq!(m.entries()[1].prob, 0.2);
        assert_eq!(m.origin(), Origin::TopSlice);

        let all = HeadSet {
            members: vec![TokenId(0), TokenId(1), TokenId(2)],
            ..head.clone()
        };
        assert_eq!(mask_distribution(&d, &all).entries(), d.entries());
        let one = HeadSet {
            members: vec![TokenId(0)],
            ..head
        };
        assert_eq!(mask_distribution(&d, &one).len(), 1);
    }

    /// Full-vocabulary distributions with frequent ties.
    fn arb_dist() -> impl Strategy<Value = TokenDistribution> {
        prop::collection::vec(prop_oneof![0u8..6, 0u8..255], 1..120).prop_map(|w| {
            let total: f64 = w.iter().map(|x| *x as f64).sum::<f64>() + 1.0;
            let mut entries: Vec<TokenEntry> = w
                .iter()
                .enumerate()
                .map(|(i, x)| TokenEntry::new(i as u32, "x", *x as f64 / total))
                .collect();
            entries.push(TokenEntry::new(w.len() as u32, "y", 1.0 / total));
            TokenDistribution::from_unsorted(entries, Origin::FullVocabulary).unwrap()
        })
    }

    fn alpha() -> impl Strategy<Value = f64> {
        prop_oneof![1e-6f64..1.0, Just(1.0)]
    }

    proptest! {
        #[test]
        fn head_holds_argmax_and_sits_in_both_filters(d in arb_dist(), a in alpha(), k in 1usize..40) {
            let head = head_filter(&d, &FilterConfig { alpha: a, k }).unwrap();
            prop_assert!(head.contains(d.argmax()));
            let members: BTreeSet<TokenId> = head.members.iter().copied().collect();
            let both: BTreeSet<TokenId> = probabilistic_filter(&d, a)
                .unwrap()
                .intersection(&rank_filter(&d, k).unwrap())
                .copied()
                .collect();
            prop_assert_eq!(members, both);
        }

        #[test]
        fn filters_are_monotone(d in arb_dist(), a1 in alpha(), a2 in alpha(), k1 in 1usize..40, k2 in 1usize..40) {
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            prop_assert!(probabilistic_filter(&d, hi).unwrap().is_subset(&probabilistic_filter(&d, lo).unwrap()));
            let (small, large) = (k1.min(k2), k1.max(k2));
            prop_assert!(rank_filter(&d, small).unwrap().is_subset(&rank_filter(&d, large).unwrap()));
        }

        #[test]
        fn top_slice_is_sufficient(d in arb_dist(), a in alpha(), k in 1usize..40, extra in 0usize..30) {
            prop_assume!(d.len() >= k);
            let cfg = FilterConfig { alpha: a, k };
            let slice = top_slice(&d, k + extra).unwrap();
            prop_assert_eq!(head_filter(&slice, &cfg).unwrap().members, head_filter(&d, &cfg).unwrap().members);
        }
    }
}
