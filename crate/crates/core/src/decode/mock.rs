//! Scripted mock language model.
//!
//! A script maps context suffixes to explicit next-token rows. The longest
//! suffix that the context ends with wins. Probability mass a row leaves
//! unassigned is spread over filler tokens with geometrically decaying
//! weights, so every step is a proper softmax over the whole vocabulary and
//! scripted pieces that are not listed for a context get probability zero.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BackendCapability, BackendError, ModelBackend};
use crate::token_space::{
    top_slice, Origin, PieceNormalizer, TokenDistribution, TokenEntry, TokenId, TokenPiece,
};

const FILLER_DECAY: f64 = 0.8;
const MASS_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MockError {
    #[error("rule {suffix:?}: {msg}")]
    BadRule { suffix: String, msg: String },
    #[error("script {path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRow {
    pub piece: String,
    pub prob: f64,
}

fn default_end_piece() -> String {
    "</s>".to_string()
}

fn default_fillers() -> usize {
    64
}

/// Script file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default = "default_end_piece")]
    pub end_piece: String,
    #[serde(default = "default_fillers")]
    pub fillers: usize,
    pub script: BTreeMap<String, Vec<MockRow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<Vec<MockRow>>,
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            end_piece: default_end_piece(),
            fillers: default_fillers(),
            script: BTreeMap::new(),
            fallback: None,
        }
    }
}

fn rows(items: &[(&str, f64)]) -> Vec<MockRow> {
    items
        .iter()
        .map(|(piece, prob)| MockRow {
            piece: piece.to_string(),
            prob: *prob,
        })
        .collect()
}

impl MockScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rule(&mut self, suffix: &str, items: &[(&str, f64)]) -> &mut Self {
        self.script.insert(suffix.to_string(), rows(items));
        self
    }

    pub fn fallback(&mut self, items: &[(&str, f64)]) -> &mut Self {
        self.fallback = Some(rows(items));
        self
    }

    /// Scripts `context` to continue with `pieces` and then the end piece,
    /// each at probability `prob`.
    pub fn chain(&mut self, context: &str, pieces: &[&str], prob: f64) -> &mut Self {
        let normalizer = PieceNormalizer::default();
        let mut ctx = context.to_string();
        for piece in pieces {
            self.rule(&ctx, &[(piece, prob)]);
            ctx.push_str(&normalizer.detokenize(piece));
        }
        let end = self.end_piece.clone();
        self.rule(&ctx, &[(&end, prob)]);
        self
    }

    pub fn load(path: &Path) -> Result<Self, MockError> {
        let io = |msg: String| MockError::Io {
            path: path.display().to_string(),
            msg,
        };
        let text = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| io(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")
    }
}

type Row = Vec<(TokenId, f64)>;

/// Deterministic scripted backend.
#[derive(Debug, Clone)]
pub struct MockLM {
    vocab: Vec<TokenPiece>,
    ids: HashMap<String, TokenId>,
    /// Longest suffix first.
    rules: Vec<(String, Row)>,
    fallback: Option<Row>,
    fillers: Vec<TokenId>,
    end: TokenId,
}

impl MockLM {
    pub fn new(script: &MockScript) -> Result<Self, MockError> {
        let mut vocab = Vec::new();
        let mut ids = HashMap::new();
        let mut intern = |piece: &str, vocab: &mut Vec<TokenPiece>| {
            *ids.entry(piece.to_string()).or_insert_with(|| {
                vocab.push(TokenPiece::new(piece));
                TokenId(vocab.len() as u32 - 1)
            })
        };
        let end = intern(&script.end_piece, &mut vocab);

        let mut check = |suffix: &str, items: &[MockRow], vocab: &mut Vec<TokenPiece>| {
            let bad = |msg: String| MockError::BadRule {
                suffix: suffix.to_string(),
                msg,
            };
            let mut row: Row = Vec::with_capacity(items.len());
            let mut mass = 0.0;
            for item in items {
                if item.piece.is_empty() {
                    return Err(bad("empty piece".into()));
                }
                if !item.prob.is_finite() || item.prob < 0.0 {
                    return Err(bad(format!("bad probability {} for {:?}", item.prob, item.piece)));
                }
                let id = intern(&item.piece, vocab);
                if row.iter().any(|(t, _)| *t == id) {
                    return Err(bad(format!("duplicate piece {:?}", item.piece)));
                }
                mass += item.prob;
                row.push((id, item.prob));
            }
            if mass > 1.0 + MASS_EPS {
                return Err(bad(format!("row mass {mass} exceeds 1")));
            }
            if script.fillers == 0 && (mass - 1.0).abs() > 1e-6 {
                return Err(bad(format!("row mass {mass} must be 1 without filler tokens")));
            }
            Ok(row)
        };

        let mut rules = Vec::with_capacity(script.script.len());
        for (suffix, items) in &script.script {
            let row = check(suffix, items, &mut vocab)?;
            rules.push((suffix.clone(), row));
        }
        rules.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        let fallback = match &script.fallback {
            Some(items) => Some(check("<fallback>", items, &mut vocab)?),
            None => None,
        };

        let mut fillers = Vec::with_capacity(script.fillers);
        for i in 0..script.fillers {
            let piece = format!("<f{i}>");
            fillers.push(intern(&piece, &mut vocab));
        }
        Ok(Self {
            vocab,
            ids,
            rules,
            fallback,
            fillers,
            end,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token_id(&self, piece: &str) -> Option<TokenId> {
        self.ids.get(piece).copied()
    }

    pub fn end_token(&self) -> TokenId {
        self.end
    }

    fn row_for(&self, context: &str) -> Option<&Row> {
        self.rules
            .iter()
            .find(|(suffix, _)| context.ends_with(suffix.as_str()))
            .map(|(_, row)| row)
            .or(self.fallback.as_ref())
    }

    /// The full-vocabulary distribution for `context`.
    pub fn full_distribution(&self, context: &str) -> Result<TokenDistribution, BackendError> {
        let row = self.row_for(context).ok_or_else(|| {
            let tail: String = context.chars().rev().take(48).collect::<Vec<_>>().into_iter().rev().collect();
            BackendError::Unscripted(tail)
        })?;
        let mut probs = vec![0.0; self.vocab.len()];
        let mut mass = 0.0;
        for (id, p) in row {
            probs[id.0 as usize] = *p;
            mass += p;
        }
        let rest = (1.0 - mass).max(0.0);
        let free: Vec<TokenId> = self
            .fillers
            .iter()
            .copied()
            .filter(|t| !row.iter().any(|(id, _)| id == t))
            .collect();
        if rest > 0.0 && !free.is_empty() {
            let norm: f64 = (0..free.len()).map(|i| FILLER_DECAY.powi(i as i32)).sum();
            for (i, t) in free.iter().enumerate() {
                probs[t.0 as usize] += rest * FILLER_DECAY.powi(i as i32) / norm;
            }
        }
        let entries = self
            .vocab
            .iter()
            .zip(probs)
            .enumerate()
            .map(|(i, (piece, prob))| TokenEntry {
                token: TokenId(i as u32),
                piece: piece.clone(),
                prob,
            })
            .collect();
        let origin = if rest > MASS_EPS && free.is_empty() {
            Origin::TopSlice
        } else {
            Origin::FullVocabulary
        };
        TokenDistribution::from_unsorted(entries, origin)
            .map_err(|e| BackendError::Invalid(e.to_string()))
    }
}

impl ModelBackend for MockLM {
    fn capability(&self) -> BackendCapability {
        BackendCapability {
            max_context: None,
            max_top_n: usize::MAX,
            normalized: true,
            vocab_size: Some(self.vocab.len()),
        }
    }

    fn step(&self, context: &str, top_n: usize) -> Result<TokenDistribution, BackendError> {
        let full = self.full_distribution(context)?;
        if top_n >= full.len() {
            return Ok(full);
        }
        top_slice(&full, top_n).map_err(|e| BackendError::Invalid(e.to_string()))
    }
}
