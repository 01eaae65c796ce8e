use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BackendError, ModelBackend};
use crate::biaser::{bias_step, BiasConfig, BiasError, Biaser, ScoreVector, SelectMode, Selector};
use crate::knowledge::EntitySet;
use crate::token_space::{PieceNormalizer, TokenDistribution, TokenId};

pub const DEFAULT_STOP_PIECES: [&str; 4] = ["</s>", "<|endoftext|>", "<eos>", "<|eot_id|>"];

/// Slice length requested from backends when not configured: `max(4k, 64)`.
pub fn default_top_n(k: usize) -> usize {
    (4 * k).max(64)
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("max_tokens must be at least 1")]
    ZeroMaxTokens,
    #[error("invalid configuration: {0}")]
    Config(#[from] BiasError),
    #[error("slice too short for rank filter: top_n {top_n} < k {k}")]
    SliceTooShort { top_n: usize, k: usize },
    #[error("backend failed at step {}: {source}", partial.total_steps())]
    Backend {
        #[source]
        source: BackendError,
        partial: Box<Transcript>,
    },
    #[error("bias step failed at step {}: {source}", partial.total_steps())]
    Step {
        #[source]
        source: BiasError,
        partial: Box<Transcript>,
    },
}

impl DecodeError {
    pub fn partial(&self) -> Option<&Transcript> {
        match self {
            DecodeError::Backend { partial, .. } | DecodeError::Step { partial, .. } => {
                Some(partial)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecodeOptions {
    pub mode: SelectMode,
    pub max_tokens: usize,
    /// Defaults to [`default_top_n`] of the filter's k.
    pub top_n: Option<usize>,
    pub stop_pieces: Vec<String>,
    pub stop_at_newline: bool,
    /// Steps kept in the transcript ring buffer.
    pub transcript_capacity: usize,
    pub normalizer: PieceNormalizer,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            mode: SelectMode::Greedy,
            max_tokens: 32,
            top_n: None,
            stop_pieces: DEFAULT_STOP_PIECES.iter().map(|s| s.to_string()).collect(),
            stop_at_newline: false,
            transcript_capacity: 4096,
            normalizer: PieceNormalizer::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub raw: TokenDistribution,
    pub head: Vec<TokenId>,
    pub scores: ScoreVector,
    pub chosen: TokenId,
    pub chosen_piece: String,
    pub sim_evaluations: usize,
    pub new_match: bool,
    pub para_match: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayMismatch {
    pub step: usize,
    pub reason: String,
}

/// Bounded record of decode steps. Counters cover every step, including
/// ones evicted from the ring buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    steps: VecDeque<StepRecord>,
    capacity: usize,
    total_steps: usize,
    max_sim_evaluations: usize,
    total_sim_evaluations: usize,
    any_para_match: bool,
}

impl Transcript {
    pub fn with_capacity(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        Self {
            steps: VecDeque::with_capacity(capacity.min(4096)),
            capacity,
            total_steps: 0,
            max_sim_evaluations: 0,
            total_sim_evaluations: 0,
            any_para_match: false,
        }
    }

    fn push(&mut self, record: StepRecord) {
        self.total_steps += 1;
        self.max_sim_evaluations = self.max_sim_evaluations.max(record.sim_evaluations);
        self.total_sim_evaluations += record.sim_evaluations;
        self.any_para_match |= record.para_match;
        if self.steps.len() == self.capacity {
            self.steps.pop_front();
        }
        self.steps.push_back(record);
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn dropped(&self) -> usize {
        self.total_steps - self.steps.len()
    }

    pub fn max_sim_evaluations(&self) -> usize {
        self.max_sim_evaluations
    }

    pub fn total_sim_evaluations(&self) -> usize {
        self.total_sim_evaluations
    }

    pub fn any_para_match(&self) -> bool {
        self.any_para_match
    }

    /// Recomputes every retained step from its raw distribution and checks
    /// the recorded scores and choice against it.
    pub fn verify_replay(&self, entities: &EntitySet, cfg: &BiasConfig) -> Result<(), ReplayMismatch> {
        for step in &self.steps {
            let fail = |reason: String| ReplayMismatch {
                step: step.index,
                reason,
            };
            let scores = bias_step(&step.raw, entities, cfg).map_err(|e| fail(e.to_string()))?;
            if scores != step.scores {
                return Err(fail("score vector differs from recomputation".into()));
            }
            if !step.head.contains(&step.chosen) {
                return Err(fail(format!("chosen token {} outside head set", step.chosen)));
            }
            let head: Vec<TokenId> = scores.entries.iter().map(|e| e.token).collect();
            if head != step.head {
                return Err(fail("head set differs from recomputation".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EndToken,
    Newline,
    MaxTokens,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub text: String,
    pub tokens: Vec<TokenId>,
    pub stop: StopReason,
    pub transcript: Transcript,
}

/// Runs the decode loop: backend step, head filter, bias, select, append.
pub fn decode<B: ModelBackend + ?Sized>(
    backend: &B,
    prompt: &str,
    entities: &EntitySet,
    cfg: &BiasConfig,
    opts: &DecodeOptions,
) -> Result<Generation, DecodeError> {
    if opts.max_tokens == 0 {
        return Err(DecodeError::ZeroMaxTokens);
    }
    cfg.validate()?;
    let k = cfg.filter.k;
    let cap = backend.capability();
    let top_n = opts.top_n.unwrap_or_else(|| default_top_n(k)).min(cap.max_top_n);
    if top_n < k {
        return Err(DecodeError::SliceTooShort { top_n, k });
    }

    let mut biaser = Biaser::new(entities, *cfg)?;
    let mut selector = Selector::new(opts.mode);
    let mut transcript = Transcript::with_capacity(opts.transcript_capacity);
    let mut context = prompt.to_string();
    let mut generated = String::new();
    let mut tokens = Vec::new();
    let mut stop = StopReason::MaxTokens;

    for index in 0..opts.max_tokens {
        let raw = match backend.step(&context, top_n) {
            Ok(d) => d,
            Err(source) => {
                return Err(DecodeError::Backend {
                    source,
                    partial: Box::new(transcript),
                })
            }
        };
        let outcome = match biaser.step(&raw) {
            Ok(o) => o,
            Err(source) => {
                return Err(DecodeError::Step {
                    source,
                    partial: Box::new(transcript),
                })
            }
        };
        // head is never empty, so neither is the score vector
        let chosen = selector.select(&outcome.scores).expect("non-empty head");
        let chosen_piece = raw
            .get(chosen)
            .map(|e| e.piece.raw.clone())
            .unwrap_or_default();
        transcript.push(StepRecord {
            index,
            head: outcome.head.members,
            scores: outcome.scores,
            chosen,
            chosen_piece: chosen_piece.clone(),
            sim_evaluations: outcome.sim_evaluations,
            new_match: outcome.new_match,
            para_match: outcome.para_match,
            raw,
        });

        if opts.stop_pieces.contains(&chosen_piece) {
            stop = StopReason::EndToken;
            break;
        }
        tokens.push(chosen);
        let text = opts.normalizer.detokenize(&chosen_piece);
        if opts.stop_at_newline {
            if let Some(pos) = text.find('\n') {
                generated.push_str(&text[..pos]);
                stop = StopReason::Newline;
                break;
            }
        }
        generated.push_str(&text);
        context.push_str(&text);
    }

    Ok(Generation {
        text: generated.trim().to_string(),
        tokens,
        stop,
        transcript,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::{MockLM, MockScript};

    const PROMPT: &str = "Question: Who wrote Misery?\nAnswer:";

    fn misery() -> (MockLM, EntitySet) {
        let mut s = MockScript::new();
        s.rule(PROMPT, &[("\u{120}Stephen", 0.6), ("\u{120}Richard", 0.3), ("\u{120}the", 0.05)]);
        s.chain(&format!("{PROMPT} Stephen"), &["\u{120}King"], 0.9);
        s.chain(&format!("{PROMPT} Richard"), &["\u{120}Daw", "kins"], 0.9);
        let e = EntitySet::from_words(["richard", "dawkins"], ["stephen", "king"]).unwrap();
        (MockLM::new(&s).unwrap(), e)
    }

    #[test]
    fn misery_biased_and_control() {
        let (lm, e) = misery();
        let cfg = BiasConfig::default();
        let g = decode(&lm, PROMPT, &e, &cfg, &DecodeOptions::default()).unwrap();
        assert_eq!(g.text, "Richard Dawkins");
        assert_eq!(g.stop, StopReason::EndToken);
        assert_eq!(g.tokens.len(), 3);
        assert_eq!(g.transcript.total_steps(), 4);
        g.transcript.verify_replay(&e, &cfg).unwrap();

        let c = decode(&lm, PROMPT, &e, &cfg.control(), &DecodeOptions::default()).unwrap();
        assert_eq!(c.text, "Stephen King");
        assert_eq!(c.transcript.max_sim_evaluations(), 0);
    }

    #[test]
    fn precondition_errors() {
        let (lm, e) = misery();
        let zero = DecodeOptions {
            max_tokens: 0,
            ..DecodeOptions::default()
        };
        assert!(matches!(
            decode(&lm, PROMPT, &e, &BiasConfig::default(), &zero),
            Err(DecodeError::ZeroMaxTokens)
        ));
        let short = DecodeOptions {
            top_n: Some(5),
            ..DecodeOptions::default()
        };
        assert!(matches!(
            decode(&lm, PROMPT, &e, &BiasConfig::default(), &short),
            Err(DecodeError::SliceTooShort { top_n: 5, k: 10 })
        ));
    }

    #[test]
    fn immediate_end_token() {
        let mut s = MockScript::new();
        s.chain("Hi", &[], 0.9);
        let lm = MockLM::new(&s).unwrap();
        let g = decode(&lm, "Hi", &EntitySet::default(), &BiasConfig::default(), &DecodeOptions::default()).unwrap();
        assert_eq!(g.text, "");
        assert!(g.tokens.is_empty());
        assert_eq!(g.transcript.total_steps(), 1);
    }

    #[test]
    fn backend_failure_keeps_partial_transcript() {
        let mut s = MockScript::new();
        s.rule("Hi", &[("\u{120}there", 0.9)]);
        let lm = MockLM::new(&s).unwrap();
        let err = decode(&lm, "Hi", &EntitySet::default(), &BiasConfig::default(), &DecodeOptions::default())
            .unwrap_err();
        assert!(matches!(err, DecodeError::Backend { source: BackendError::Unscripted(_), .. }));
        assert_eq!(err.partial().unwrap().total_steps(), 1);
    }

    #[test]
    fn newline_stop_and_ring_buffer() {
        let mut s = MockScript::new();
        s.fallback(&[("\u{120}word", 0.9)]);
        s.rule("x word word", &[("\n", 0.9)]);
        let lm = MockLM::new(&s).unwrap();
        let opts = DecodeOptions {
            stop_at_newline: true,
            transcript_capacity: 2,
            ..DecodeOptions::default()
        };
        let g = decode(&lm, "x", &EntitySet::default(), &BiasConfig::default(), &opts).unwrap();
        assert_eq!(g.stop, StopReason::Newline);
        assert_eq!(g.text, "word word");
        assert_eq!(g.transcript.total_steps(), 3);
        assert_eq!(g.transcript.len(), 2);
        assert_eq!(g.transcript.dropped(), 1);
    }

    #[test]
    fn replay_detects_tampering() {
        let (lm, e) = misery();
        let cfg = BiasConfig::default();
        let mut g = decode(&lm, PROMPT, &e, &cfg, &DecodeOptions::default()).unwrap();
        assert!(g.transcript.verify_replay(&e, &cfg.control()).is_err());
        g.transcript.steps.front_mut().unwrap().chosen = TokenId(9999);
        assert_eq!(g.transcript.verify_replay(&e, &cfg).unwrap_err().step, 0);
    }

    #[test]
    fn default_top_n_rule() {
        assert_eq!(default_top_n(10), 64);
        assert_eq!(default_top_n(32), 128);
    }
}
