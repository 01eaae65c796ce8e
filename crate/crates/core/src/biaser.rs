//! The adaptive token bias step.
//!
//! For every token in the head set the mean head probability `P̄` is used as
//! the bias unit: new-knowledge matches add `λn · P̄ · sim`, parametric
//! matches subtract `λp · P̄ · sim`, summed over every matching entity word.
//! `P̄` is taken once, before any adjustment.
//!
//! Scores are adjusted probabilities, not a distribution. They are only
//! renormalized inside [`select_next`] when sampling.

use std::collections::HashMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entity_match::{MatchError, PreparedEntity, DEFAULT_NGRAM};
use crate::filter::{head_filter, mask_distribution, FilterConfig, FilterError, HeadSet};
use crate::knowledge::EntitySet;
use crate::token_space::{TokenDistribution, TokenId};

pub const DEFAULT_LAMBDA_NEW: f64 = 25.0;
pub const DEFAULT_LAMBDA_PARA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BiasError {
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Entity(#[from] MatchError),
    #[error("n-gram size must be at least 1")]
    ZeroNgram,
    #[error("bias coefficient {name} must be finite and non-negative, got {value}")]
    BadLambda { name: &'static str, value: f64 },
    #[error("empty masked distribution")]
    EmptyMasked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FloorPolicy {
    #[default]
    ClampZero,
    KeepNegative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasConfig {
    pub filter: FilterConfig,
    pub n: usize,
    pub lambda_new: f64,
    pub lambda_para: f64,
    pub floor_policy: FloorPolicy,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self {
            filter: FilterConfig::default(),
            n: DEFAULT_NGRAM,
            lambda_new: DEFAULT_LAMBDA_NEW,
            lambda_para: DEFAULT_LAMBDA_PARA,
            floor_policy: FloorPolicy::ClampZero,
        }
    }
}

impl BiasConfig {
    /// Same filter, both coefficients zeroed.
    pub fn control(&self) -> Self {
        Self {
            lambda_new: 0.0,
            lambda_para: 0.0,
            ..*self
        }
    }

    pub fn is_control(&self) -> bool {
        self.lambda_new == 0.0 && self.lambda_para == 0.0
    }

    pub fn validate(&self) -> Result<(), BiasError> {
        self.filter.validate()?;
        if self.n == 0 {
            return Err(BiasError::ZeroNgram);
        }
        for (name, value) in [
            ("lambda_new", self.lambda_new),
            ("lambda_para", self.lambda_para),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(BiasError::BadLambda { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredToken {
    pub token: TokenId,
    /// Masked (unbiased) probability.
    pub prob: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    /// One entry per head member, in head order.
    pub entries: Vec<ScoredToken>,
    /// Mean head probability the bias was scaled by.
    pub basis: f64,
    /// True when every score was zero and the masked probabilities were used.
    pub fell_back: bool,
}

impl ScoreVector {
    pub fn get(&self, token: TokenId) -> Option<&ScoredToken> {
        self.entries.iter().find(|e| e.token == token)
    }

    pub fn score_of(&self, token: TokenId) -> Option<f64> {
        self.get(token).map(|e| e.score)
    }

    /// Max score, ties to the lowest token id.
    pub fn argmax(&self) -> Option<TokenId> {
        self.entries
            .iter()
            .max_by(|a, b| a.score.total_cmp(&b.score).then(b.token.cmp(&a.token)))
            .map(|e| e.token)
    }
}

/// Arithmetic mean of the masked probabilities.
pub fn mean_filtered_prob(masked: &TokenDistribution) -> Result<f64, BiasError> {
    if masked.is_empty() {
        return Err(BiasError::EmptyMasked);
    }
    Ok(masked.coverage() / masked.len() as f64)
}

/// Everything a single bias step produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub head: HeadSet,
    pub scores: ScoreVector,
    /// Similarity computations performed (memo hits excluded).
    pub sim_evaluations: usize,
    /// Some head token matched a parametric entity.
    pub para_match: bool,
    /// Some head token matched a new-knowledge entity.
    pub new_match: bool,
}

#[derive(Debug, Clone)]
struct MemoEntry {
    piece: String,
    new_sum: f64,
    para_sum: f64,
}

/// Per-session bias state: prepared entity grams plus a memo of summed
/// similarities keyed by token id.
#[derive(Debug, Clone)]
pub struct Biaser {
    cfg: BiasConfig,
    new_entities: Vec<PreparedEntity>,
    para_entities: Vec<PreparedEntity>,
    memo: HashMap<TokenId, MemoEntry>,
    memoize: bool,
}

impl Biaser {
    pub fn new(entities: &EntitySet, cfg: BiasConfig) -> Result<Self, BiasError> {
        cfg.validate()?;
        let prep = |list: &[crate::entity_match::EntityString]| {
            list.iter()
                .cloned()
                .map(|e| PreparedEntity::new(e, cfg.n))
                .collect::<Result<Vec<_>, _>>()
        };
        Ok(Self {
            cfg,
            new_entities: prep(&entities.new_entities)?,
            para_entities: prep(&entities.para_entities)?,
            memo: HashMap::new(),
            memoize: true,
        })
    }

    /// Disables the similarity memo (every step recomputes from scratch).
    pub fn without_memo(mut self) -> Self {
        self.memoize = false;
        self
    }

    pub fn config(&self) -> &BiasConfig {
        &self.cfg
    }

    pub fn entity_count(&self) -> usize {
        self.new_entities.len() + self.para_entities.len()
    }

    fn sums(&mut self, token: TokenId, piece: &str, evaluations: &mut usize) -> (f64, f64) {
        if self.memoize {
            if let Some(m) = self.memo.get(&token) {
                if m.piece == piece {
                    return (m.new_sum, m.para_sum);
                }
            }
        }
        let new_sum: f64 = self.new_entities.iter().map(|e| e.similarity(piece)).sum();
        let para_sum: f64 = self.para_entities.iter().map(|e| e.similarity(piece)).sum();
        *evaluations += self.new_entities.len() + self.para_entities.len();
        if self.memoize {
            self.memo.insert(
                token,
                MemoEntry {
                    piece: piece.to_string(),
                    new_sum,
                    para_sum,
                },
            );
        }
        (new_sum, para_sum)
    }

    pub fn step(&mut self, dist: &TokenDistribution) -> Result<StepOutcome, BiasError> {
        let head = head_filter(dist, &self.cfg.filter)?;
        let masked = mask_distribution(dist, &head);
        let basis = mean_filtered_prob(&masked)?;
        let lambda_new = self.cfg.lambda_new;
        let lambda_para = self.cfg.lambda_para;
        let control = self.cfg.is_control();

        let mut evaluations = 0;
        let mut new_match = false;
        let mut para_match = false;
        let mut entries = Vec::with_capacity(masked.len());
        for e in masked.entries() {
            let score = if control {
                e.prob
            } else {
                let (new_sum, para_sum) = self.sums(e.token, &e.piece.normalized, &mut evaluations);
                new_match |= new_sum > 0.0;
                para_match |= para_sum > 0.0;
                let raw = e.prob + lambda_new * basis * new_sum - lambda_para * basis * para_sum;
                match self.cfg.floor_policy {
                    FloorPolicy::ClampZero => raw.max(0.0),
                    FloorPolicy::KeepNegative => raw,
                }
            };
            entries.push(ScoredToken {
                token: e.token,
                prob: e.prob,
                score,
            });
        }

        let fell_back = entries.iter().all(|e| e.score == 0.0);
        if fell_back {
            for e in &mut entries {
                e.score = e.prob;
            }
        }
        Ok(StepOutcome {
            head,
            scores: ScoreVector {
                entries,
                basis,
                fell_back,
            },
            sim_evaluations: evaluations,
            para_match,
            new_match,
        })
    }
}

/// Stateless single step.
pub fn bias_step(
    dist: &TokenDistribution,
    entities: &EntitySet,
    cfg: &BiasConfig,
) -> Result<ScoreVector, BiasError> {
    let mut biaser = Biaser::new(entities, *cfg)?.without_memo();
    Ok(biaser.step(dist)?.scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SelectMode {
    Greedy,
    Sample { seed: u64 },
}

/// Token choice with the RNG state for one decoding session.
#[derive(Debug, Clone)]
pub struct Selector {
    rng: Option<ChaCha8Rng>,
}

impl Selector {
    pub fn new(mode: SelectMode) -> Self {
        let rng = match mode {
            SelectMode::Greedy => None,
            SelectMode::Sample { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        Self { rng }
    }

    /// Greedy picks the max score (lowest id on ties). Sampling draws from
    /// the non-negative scores renormalized over the head.
    pub fn select(&mut self, scores: &ScoreVector) -> Option<TokenId> {
        let Some(rng) = self.rng.as_mut() else {
            return scores.argmax();
        };
        let weights: Vec<f64> = scores.entries.iter().map(|e| e.score.max(0.0)).collect();
        match WeightedIndex::new(&weights) {
            Ok(index) => Some(scores.entries[index.sample(rng)].token),
            // all-zero weights: nothing to sample from
            Err(_) => scores.argmax(),
        }
    }
}

pub fn select_next(scores: &ScoreVector, mode: SelectMode) -> Option<TokenId> {
    Selector::new(mode).select(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entity_match::{token_entity_similarity, EntityString};
    use crate::token_space::{Origin, TokenEntry};
    use proptest::prelude::*;

    fn misery() -> (TokenDistribution, EntitySet) {
        let dist = TokenDistribution::new(
            vec![
                TokenEntry::new(0, "\u{120}Stephen", 0.6),
                TokenEntry::new(1, "\u{120}Richard", 0.3),
                TokenEntry::new(2, "\u{120}the", 0.1),
            ],
            Origin::FullVocabulary,
        )
        .unwrap();
        let entities = EntitySet::from_words(["richard", "dawkins"], ["stephen", "king"]).unwrap();
        (dist, entities)
    }

    #[test]
    fn mean_examples() {
        let d = TokenDistribution::new(
            vec![
                TokenEntry::new(0, "a", 0.6),
                TokenEntry::new(1, "b", 0.3),
                TokenEntry::new(2, "c", 0.1),
            ],
            Origin::TopSlice,
        )
        .unwrap();
        assert!((mean_filtered_prob(&d).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let one = TokenDistribution::new(vec![TokenEntry::new(0, "a", 0.9)], Origin::TopSlice)
            .unwrap();
        assert_eq!(mean_filtered_prob(&one).unwrap(), 0.9);
        let two = TokenDistribution::new(
            vec![TokenEntry::new(0, "a", 0.5), TokenEntry::new(1, "b", 0.5)],
            Origin::FullVocabulary,
        )
        .unwrap();
        assert_eq!(mean_filtered_prob(&two).unwrap(), 0.5);
    }

    #[test]
    fn worked_example_flips_argmax() {
        let (dist, entities) = misery();
        let s = bias_step(&dist, &entities, &BiasConfig::default()).unwrap();
        assert!((s.basis - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.score_of(TokenId(1)).unwrap() - 8.633_333_333).abs() < 1e-6);
        assert!((s.score_of(TokenId(0)).unwrap() - 0.266_666_667).abs() < 1e-6);
        assert!((s.score_of(TokenId(2)).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(select_next(&s, SelectMode::Greedy), Some(TokenId(1)));

        let control = bias_step(&dist, &entities, &BiasConfig::default().control()).unwrap();
        for e in &control.entries {
            assert_eq!(e.score, e.prob);
        }
        assert_eq!(select_next(&control, SelectMode::Greedy), Some(TokenId(0)));
    }

    #[test]
    fn no_matches_is_identity() {
        let (dist, _) = misery();
        let entities = EntitySet::from_words(["xyz"], ["qqq"]).unwrap();
        let s = bias_step(&dist, &entities, &BiasConfig::default()).unwrap();
        for e in &s.entries {
            assert_eq!(e.score, e.prob);
        }
    }

    #[test]
    fn clamp_and_fallback() {
        let dist = TokenDistribution::new(
            vec![TokenEntry::new(0, "king", 0.5), TokenEntry::new(1, "kin", 0.5)],
            Origin::FullVocabulary,
        )
        .unwrap();
        let entities = EntitySet::from_words(["zzz"], ["king"]).unwrap();
        let cfg = BiasConfig {
            lambda_para: 10.0,
            ..BiasConfig::default()
        };
        let s = bias_step(&dist, &entities, &cfg).unwrap();
        assert!(s.fell_back);
        assert_eq!(s.score_of(TokenId(0)), Some(0.5));

        let keep = BiasConfig {
            floor_policy: FloorPolicy::KeepNegative,
            ..cfg
        };
        let s = bias_step(&dist, &entities, &keep).unwrap();
        assert!(!s.fell_back);
        assert!((s.score_of(TokenId(0)).unwrap() - (0.5 - 10.0 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn shared_word_nets_both_adjustments() {
        let dist = TokenDistribution::new(
            vec![TokenEntry::new(0, "smith", 0.6), TokenEntry::new(1, "x", 0.4)],
            Origin::FullVocabulary,
        )
        .unwrap();
        let entities = EntitySet::from_words(["smith"], ["smith"]).unwrap();
        let s = bias_step(&dist, &entities, &BiasConfig::default()).unwrap();
        assert!((s.score_of(TokenId(0)).unwrap() - (0.6 + 24.0 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn greedy_tie_break_and_singletons() {
        let tie = ScoreVector {
            entries: vec![
                ScoredToken { token: TokenId(7), prob: 0.5, score: 0.5 },
                ScoredToken { token: TokenId(3), prob: 0.5, score: 0.5 },
            ],
            basis: 0.5,
            fell_back: false,
        };
        assert_eq!(select_next(&tie, SelectMode::Greedy), Some(TokenId(3)));
        let one = ScoreVector {
            entries: vec![ScoredToken { token: TokenId(9), prob: 1.0, score: 1.0 }],
            basis: 1.0,
            fell_back: false,
        };
        assert_eq!(select_next(&one, SelectMode::Sample { seed: 1 }), Some(TokenId(9)));
    }

    #[test]
    fn sampling_is_seeded_and_stays_in_head() {
        let (dist, entities) = misery();
        let s = bias_step(&dist, &entities, &BiasConfig::default()).unwrap();
        let draw = |seed| {
            let mut sel = Selector::new(SelectMode::Sample { seed });
            (0..50).map(|_| sel.select(&s).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(42), draw(42));
        assert!(draw(42).iter().all(|t| s.get(*t).is_some()));
        // richard carries ~96% of the renormalized mass
        let hits = draw(7).iter().filter(|t| **t == TokenId(1)).count();
        assert!(hits > 40);
    }

    #[test]
    fn memo_matches_fresh_computation() {
        let (dist, entities) = misery();
        let mut b = Biaser::new(&entities, BiasConfig::default()).unwrap();
        let first = b.step(&dist).unwrap();
        let second = b.step(&dist).unwrap();
        assert_eq!(first.scores, second.scores);
        assert_eq!(first.sim_evaluations, 3 * 4);
        assert_eq!(second.sim_evaluations, 0);
        assert!(first.para_match && first.new_match);
    }

    #[test]
    fn config_validation() {
        assert!(BiasConfig::default().validate().is_ok());
        let bad = BiasConfig {
            lambda_new: -1.0,
            ..BiasConfig::default()
        };
        assert!(matches!(bad.validate(), Err(BiasError::BadLambda { .. })));
        let bad = BiasConfig {
            n: 0,
            ..BiasConfig::default()
        };
        assert_eq!(bad.validate(), Err(BiasError::ZeroNgram));
    }

    const PIECES: [&str; 12] = [
        "\u{120}richard", "\u{120}daw", "kins", "\u{120}stephen", "\u{120}king", "\u{120}the",
        "\u{120}a", "\u{120}st", "ard", "\u{120}ki", "\u{2581}of", "\u{120}x",
    ];

    /// Top slices over the piece list; weights from a small range so ties
    /// occur.
    fn arb_slice() -> impl Strategy<Value = TokenDistribution> {
        prop::collection::vec((0usize..PIECES.len(), 1u8..20), 10..40).prop_map(|rows| {
            let total: f64 = rows.iter().map(|r| r.1 as f64).sum::<f64>() * 1.25;
            let entries = rows
                .iter()
                .enumerate()
                .map(|(i, (p, w))| TokenEntry::new(i as u32, PIECES[*p], *w as f64 / total))
                .collect();
            TokenDistribution::from_unsorted(entries, Origin::TopSlice).unwrap()
        })
    }

    fn arb_cfg() -> impl Strategy<Value = BiasConfig> {
        (1e-4f64..0.5, 1usize..11, 1usize..4, 0.0f64..40.0, 0.0f64..4.0).prop_map(|(alpha, k, n, ln, lp)| {
            BiasConfig {
                filter: crate::filter::FilterConfig { alpha, k },
                n,
                lambda_new: ln,
                lambda_para: lp,
                ..BiasConfig::default()
            }
        })
    }

    fn sum_sim(piece: &TokenEntry, list: &[EntityString], n: usize) -> f64 {
        list.iter().map(|e| token_entity_similarity(&piece.piece, e, n)).sum()
    }

    proptest! {
        #[test]
        fn adjustment_is_additive(d in arb_slice(), cfg in arb_cfg()) {
            let (_, entities) = misery();
            let keep = BiasConfig { floor_policy: FloorPolicy::KeepNegative, ..cfg };
            let s = bias_step(&d, &entities, &keep).unwrap();
            prop_assume!(!s.fell_back);
            for e in &s.entries {
                let entry = d.get(e.token).unwrap();
                let sn = sum_sim(entry, &entities.new_entities, cfg.n);
                let sp = sum_sim(entry, &entities.para_entities, cfg.n);
                let want = s.basis * (cfg.lambda_new * sn - cfg.lambda_para * sp);
                prop_assert!((e.score - e.prob - want).abs() < 1e-9);
            }
        }

        #[test]
        fn scaling_preserves_head_and_argmax(d in arb_slice(), cfg in arb_cfg(), shift in 1i32..4) {
            let (_, entities) = misery();
            let c = 0.5f64.powi(shift);
            let scaled = d.scaled(c).unwrap();
            let a = bias_step(&d, &entities, &cfg).unwrap();
            let b = bias_step(&scaled, &entities, &cfg).unwrap();
            let heads = |s: &ScoreVector| s.entries.iter().map(|e| e.token).collect::<Vec<_>>();
            prop_assert_eq!(heads(&a), heads(&b));
            prop_assert_eq!(a.argmax(), b.argmax());
            prop_assert!((b.basis - c * a.basis).abs() < 1e-15);
        }

        #[test]
        fn constructive_flip(pp in 0.2f64..0.55, pq in 0.01f64..0.2, ln in 0.0f64..40.0, lp in 0.0f64..4.0) {
            let mut entries = vec![
                TokenEntry::new(0, "\u{120}king", pp),
                TokenEntry::new(1, "\u{120}dawkins", pq),
            ];
            for i in 0..8 {
                entries.push(TokenEntry::new(2 + i, &format!("\u{120}w{i}"), pq / 8.0));
            }
            let d = TokenDistribution::from_unsorted(entries, Origin::TopSlice).unwrap();
            let entities = EntitySet::from_words(["dawkins"], ["king"]).unwrap();
            let cfg = BiasConfig { lambda_new: ln, lambda_para: lp, ..BiasConfig::default() };
            let s = bias_step(&d, &entities, &cfg).unwrap();
            let p_bar = s.basis;
            if pq + ln * p_bar > pp - lp * p_bar {
                prop_assert_eq!(select_next(&s, SelectMode::Greedy), Some(TokenId(1)));
            }
        }

        #[test]
        fn similarity_work_is_bounded(d in arb_slice(), cfg in arb_cfg()) {
            let (_, entities) = misery();
            let out = Biaser::new(&entities, cfg).unwrap().without_memo().step(&d).unwrap();
            prop_assert!(out.sim_evaluations <= out.head.len() * entities.len());
            if out.head.len() <= cfg.filter.k {
                prop_assert!(out.sim_evaluations <= cfg.filter.k * entities.len());
            }
        }

        #[test]
        fn choices_stay_in_head(d in arb_slice(), cfg in arb_cfg(), seed in any::<u64>()) {
            let (_, entities) = misery();
            let s = bias_step(&d, &entities, &cfg).unwrap();
            let head = head_filter(&d, &cfg.filter).unwrap();
            let mut sel = Selector::new(SelectMode::Sample { seed });
            for _ in 0..10 {
                prop_assert!(head.contains(sel.select(&s).unwrap()));
            }
            prop_assert!(head.contains(select_next(&s, SelectMode::Greedy).unwrap()));
        }
    }
}
