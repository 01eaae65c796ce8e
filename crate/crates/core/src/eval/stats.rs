//! Probability and rank statistics of entity first tokens.
//!
//! A token counts as the first token of an entity word when its raw piece
//! carries a word-boundary marker and its normalized text is a non-empty
//! prefix of the word. At each recorded step the best-ranked such token
//! with positive probability in the raw slice is observed. Its value is the
//! selection distribution of that arm: head scores divided by their sum,
//! zero outside the head. Ranks order the head by score (ties to the lower
//! id), followed by the rest of the slice in raw order.

use serde::{Deserialize, Serialize};

use crate::decode::Transcript;
use crate::entity_match::EntityString;
use crate::knowledge::EntitySet;
use crate::token_space::{PieceNormalizer, TokenId};

const PROB_BUCKETS: usize = 10;
const RANK_BUCKETS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub bucket: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub rows: Vec<HistogramRow>,
}

impl Histogram {
    fn with_labels(labels: impl IntoIterator<Item = String>) -> Self {
        Self {
            rows: labels
                .into_iter()
                .map(|bucket| HistogramRow { bucket, count: 0 })
                .collect(),
        }
    }

    pub fn total(&self) -> u64 {
        self.rows.iter().map(|r| r.count).sum()
    }

    pub fn count(&self, bucket: &str) -> Option<u64> {
        self.rows.iter().find(|r| r.bucket == bucket).map(|r| r.count)
    }

    fn add(&mut self, other: &Histogram) {
        for (a, b) in self.rows.iter_mut().zip(&other.rows) {
            a.count += b.count;
        }
    }
}

fn prob_histogram() -> Histogram {
    Histogram::with_labels((0..PROB_BUCKETS).map(|i| {
        format!(
            "{:.1}-{:.1}",
            i as f64 / PROB_BUCKETS as f64,
            (i + 1) as f64 / PROB_BUCKETS as f64
        )
    }))
}

fn rank_histogram() -> Histogram {
    Histogram::with_labels(
        (1..=RANK_BUCKETS)
            .map(|r| r.to_string())
            .chain(std::iter::once(format!(">{RANK_BUCKETS}"))),
    )
}

/// Observations for one knowledge source in one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityHistograms {
    pub observations: u64,
    pub prob: Histogram,
    pub rank: Histogram,
}

impl Default for EntityHistograms {
    fn default() -> Self {
        Self {
            observations: 0,
            prob: prob_histogram(),
            rank: rank_histogram(),
        }
    }
}

impl EntityHistograms {
    fn observe(&mut self, prob: f64, rank: usize) {
        self.observations += 1;
        let b = ((prob * PROB_BUCKETS as f64) as usize).min(PROB_BUCKETS - 1);
        self.prob.rows[b].count += 1;
        let r = rank.clamp(1, RANK_BUCKETS + 1) - 1;
        self.rank.rows[r].count += 1;
    }

    fn merge(&mut self, other: &EntityHistograms) {
        self.observations += other.observations;
        self.prob.add(&other.prob);
        self.rank.add(&other.rank);
    }
}

/// Histograms for one decoding arm, split by knowledge source.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub new_knowledge: EntityHistograms,
    pub parametric_knowledge: EntityHistograms,
}

impl ArmStats {
    pub fn merge(&mut self, other: &ArmStats) {
        self.new_knowledge.merge(&other.new_knowledge);
        self.parametric_knowledge.merge(&other.parametric_knowledge);
    }
}

/// Biased versus control arm.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EntityStats {
    pub biased: ArmStats,
    pub control: ArmStats,
}

fn first_token(
    slice: &[crate::token_space::TokenEntry],
    entity: &EntityString,
    normalizer: &PieceNormalizer,
) -> Option<TokenId> {
    slice
        .iter()
        .find(|e| {
            let n = &e.piece.normalized;
            e.prob > 0.0
                && !n.is_empty()
                && normalizer.strip_marker(&e.piece.raw).is_some()
                && entity.text.starts_with(n.as_str())
        })
        .map(|e| e.token)
}

fn observe_entities(
    out: &mut EntityHistograms,
    entities: &[EntityString],
    step: &crate::decode::StepRecord,
    normalizer: &PieceNormalizer,
) {
    let scores = &step.scores.entries;
    let total: f64 = scores.iter().map(|s| s.score.max(0.0)).sum();
    let mut order: Vec<(TokenId, f64)> = scores.iter().map(|s| (s.token, s.score)).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for entity in entities {
        let Some(token) = first_token(step.raw.entries(), entity, normalizer) else {
            continue;
        };
        let (prob, rank) = match order.iter().position(|(t, _)| *t == token) {
            Some(pos) => {
                let p = if total > 0.0 { order[pos].1.max(0.0) / total } else { 0.0 };
                (p, pos + 1)
            }
            None => {
                let behind = step
                    .raw
                    .entries()
                    .iter()
                    .filter(|e| !step.head.contains(&e.token))
                    .position(|e| e.token == token)
                    .unwrap_or(0);
                (0.0, order.len() + behind + 1)
            }
        };
        out.observe(prob, rank);
    }
}

/// Collects first-token observations from every retained step.
pub fn entity_prob_stats(transcripts: &[&Transcript], entities: &EntitySet) -> ArmStats {
    let normalizer = PieceNormalizer::default();
    let mut stats = ArmStats::default();
    for t in transcripts {
        for step in t.steps() {
            observe_entities(&mut stats.new_knowledge, &entities.new_entities, step, &normalizer);
            observe_entities(
                &mut stats.parametric_knowledge,
                &entities.para_entities,
                step,
                &normalizer,
            );
        }
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::biaser::BiasConfig;
    use crate::decode::{decode, DecodeOptions, MockLM, MockScript};

    fn scenario() -> (MockLM, EntitySet) {
        let mut s = MockScript::new();
        s.fillers = 0;
        s.rule(
            "Answer:",
            &[("\u{120}Stephen", 0.6), ("\u{120}Richard", 0.3), ("\u{120}the", 0.1)],
        );
        s.rule("Answer: Stephen", &[("</s>", 1.0)]);
        s.rule("Answer: Richard", &[("</s>", 1.0)]);
        let e = EntitySet::from_words(["richard", "dawkins"], ["stephen", "king"]).unwrap();
        (MockLM::new(&s).unwrap(), e)
    }

    fn opts() -> DecodeOptions {
        DecodeOptions {
            top_n: Some(3),
            ..DecodeOptions::default()
        }
    }

    fn cfg() -> BiasConfig {
        let mut c = BiasConfig::default();
        c.filter.k = 3;
        c
    }

    #[test]
    fn rank_shift_is_visible() {
        let (lm, e) = scenario();
        let biased = decode(&lm, "Answer:", &e, &cfg(), &opts()).unwrap();
        let control = decode(&lm, "Answer:", &e, &cfg().control(), &opts()).unwrap();
        let b = entity_prob_stats(&[&biased.transcript], &e);
        let c = entity_prob_stats(&[&control.transcript], &e);
        // first step only: at the end step both names have probability zero
        assert_eq!(c.new_knowledge.rank.count("2"), Some(1));
        assert_eq!(b.new_knowledge.rank.count("1"), Some(1));
        assert_eq!(c.new_knowledge.prob.count("0.3-0.4"), Some(1));
        // 8.6333 / (8.6333 + 0.2667 + 0.1) = 0.959
        assert_eq!(b.new_knowledge.prob.count("0.9-1.0"), Some(1));
        assert_eq!(c.parametric_knowledge.rank.count("1"), Some(1));
        assert_eq!(b.parametric_knowledge.rank.count("2"), Some(1));
    }

    #[test]
    fn absent_entity_and_identical_arms() {
        let (lm, e) = scenario();
        let other = EntitySet::from_words(["zebra"], Vec::<&str>::new()).unwrap();
        let run = decode(&lm, "Answer:", &e, &cfg(), &opts()).unwrap();
        let s = entity_prob_stats(&[&run.transcript], &other);
        assert_eq!(s.new_knowledge.observations, 0);
        assert_eq!(s.new_knowledge.prob.total(), 0);
        let again = decode(&lm, "Answer:", &e, &cfg(), &opts()).unwrap();
        assert_eq!(s, entity_prob_stats(&[&again.transcript], &other));
        assert_eq!(
            entity_prob_stats(&[&run.transcript], &e),
            entity_prob_stats(&[&again.transcript], &e)
        );
    }
}
