//! Character n-gram decomposition and the substring-gated Jaccard similarity
//! between a decoded token piece and an entity word.
//!
//! Lengths are counted in Unicode scalar values.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::token_space::TokenPiece;

pub const DEFAULT_NGRAM: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MatchError {
    #[error("empty string")]
    EmptyString,
    #[error("n must be at least 1")]
    ZeroN,
    #[error("n-gram sizes differ: {0} vs {1}")]
    MismatchedN(usize, usize),
    #[error("entity string must be non-empty and contain no whitespace: {0:?}")]
    InvalidEntity(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NGramSet {
    pub n: usize,
    pub grams: BTreeSet<String>,
}

impl NGramSet {
    pub fn len(&self) -> usize {
        self.grams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grams.is_empty()
    }
}

/// All contiguous length-`n` substrings of `s`; strings shorter than `n`
/// decompose to `{s}`.
pub fn ngram_decompose(s: &str, n: usize) -> Result<NGramSet, MatchError> {
    if n == 0 {
        return Err(MatchError::ZeroN);
    }
    if s.is_empty() {
        return Err(MatchError::EmptyString);
    }
    let bounds: Vec<usize> = s
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(s.len()))
        .collect();
    let chars = bounds.len() - 1;
    let grams = if chars < n {
        BTreeSet::from([s.to_string()])
    } else {
        (0..=chars - n)
            .map(|i| s[bounds[i]..bounds[i + n]].to_string())
            .collect()
    };
    Ok(NGramSet { n, grams })
}

pub fn jaccard(a: &NGramSet, b: &NGramSet) -> Result<f64, MatchError> {
    if a.n != b.n {
        return Err(MatchError::MismatchedN(a.n, b.n));
    }
    if a.is_empty() || b.is_empty() {
        return Err(MatchError::EmptyString);
    }
    let inter = a.grams.intersection(&b.grams).count();
    let union = a.len() + b.len() - inter;
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeSource {
    NewKnowledge,
    ParametricKnowledge,
}

/// A single normalized entity word.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntityString {
    pub text: String,
    pub source: KnowledgeSource,
}

impl EntityString {
    pub fn new(text: impl Into<String>, source: KnowledgeSource) -> Result<Self, MatchError> {
        let text = text.into();
        if text.is_empty() || text.chars().any(char::is_whitespace) {
            return Err(MatchError::InvalidEntity(text));
        }
        Ok(Self { text, source })
    }
}

/// Zero unless the piece occurs inside the entity; otherwise the n-gram
/// Jaccard of the two strings.
///
/// A piece shorter than `n` is compared at gram size `len(piece)` on both
/// sides, so a contained piece always scores above zero.
pub fn token_entity_similarity(piece: &TokenPiece, entity: &EntityString, n: usize) -> f64 {
    similarity_str(&piece.normalized, &entity.text, n)
}

pub(crate) fn similarity_str(piece: &str, entity: &str, n: usize) -> f64 {
    if piece.is_empty() || n == 0 || !entity.contains(piece) {
        return 0.0;
    }
    let n = n.min(piece.chars().count());
    match (ngram_decompose(piece, n), ngram_decompose(entity, n)) {
        (Ok(a), Ok(b)) => jaccard(&a, &b).unwrap_or(0.0),
        _ => 0.0,
    }
}

/// An entity with its n-gram set precomputed, for repeated matching.
#[derive(Debug, Clone)]
pub struct PreparedEntity {
    pub entity: EntityString,
    grams: NGramSet,
}

impl PreparedEntity {
    pub fn new(entity: EntityString, n: usize) -> Result<Self, MatchError> {
        let grams = ngram_decompose(&entity.text, n)?;
        Ok(Self { entity, grams })
    }

    pub fn similarity(&self, piece: &str) -> f64 {
        if piece.is_empty() || !self.entity.text.contains(piece) {
            return 0.0;
        }
        let len = piece.chars().count();
        if len < self.grams.n {
            return similarity_str(piece, &self.entity.text, self.grams.n);
        }
        match ngram_decompose(piece, self.grams.n) {
            Ok(g) => jaccard(&g, &self.grams).unwrap_or(0.0),
            Err(_) => 0.0,
        }
    }
}
