//! Rule-based entity extraction.

use std::collections::HashSet;
use std::path::Path;

use thiserror::Error;

use crate::entity_match::{EntityString, KnowledgeSource};

const DEFAULT_STOPWORDS: &str = include_str!("../../data/stopwords.txt");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExtractError {
    #[error("empty input")]
    EmptyInput,
    #[error("no entities extracted from {0:?}")]
    NoEntities(String),
    #[error("stop-word list {path}: {msg}")]
    StopList { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractInput<'a> {
    /// An object phrase such as "Richard Dawkins"; every word is kept.
    Object(&'a str),
    /// A free-text fact sentence; stop words are dropped.
    RawText(&'a str),
}

impl ExtractInput<'_> {
    fn text(&self) -> &str {
        match self {
            ExtractInput::Object(s) | ExtractInput::RawText(s) => s,
        }
    }
}

/// Turns a fact or object phrase into split entity words.
pub trait EntityExtractor: Send + Sync {
    fn extract(
        &self,
        input: ExtractInput<'_>,
        source: KnowledgeSource,
    ) -> Result<Vec<EntityString>, ExtractError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopList(HashSet<String>);

impl Default for StopList {
    fn default() -> Self {
        Self::parse(DEFAULT_STOPWORDS)
    }
}

impl StopList {
    /// One word per line; `#` starts a comment.
    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .map(|l| l.split('#').next().unwrap_or("").trim())
                .filter(|l| !l.is_empty())
                .map(str::to_lowercase)
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self, ExtractError> {
        std::fs::read_to_string(path)
            .map(|t| Self::parse(&t))
            .map_err(|e| ExtractError::StopList {
                path: path.display().to_string(),
                msg: e.to_string(),
            })
    }

    pub fn from_words<I: IntoIterator<Item = S>, S: AsRef<str>>(words: I) -> Self {
        Self(words.into_iter().map(|w| w.as_ref().to_lowercase()).collect())
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Whitespace split, punctuation trimmed from word edges, lowercased,
/// deduplicated in order of appearance.
#[derive(Debug, Clone, Default)]
pub struct RuleExtractor {
    stop_words: StopList,
}

impl RuleExtractor {
    pub fn new(stop_words: StopList) -> Self {
        Self { stop_words }
    }

    pub fn stop_words(&self) -> &StopList {
        &self.stop_words
    }
}

fn clean_word(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

impl EntityExtractor for RuleExtractor {
    fn extract(
        &self,
        input: ExtractInput<'_>,
        source: KnowledgeSource,
    ) -> Result<Vec<EntityString>, ExtractError> {
        let text = input.text();
        if text.trim().is_empty() {
            return Err(ExtractError::EmptyInput);
        }
        let drop_stop = matches!(input, ExtractInput::RawText(_));
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for word in text.split_whitespace().map(clean_word) {
            if word.is_empty() || (drop_stop && self.stop_words.contains(&word)) {
                continue;
            }
            if seen.insert(word.clone()) {
                // clean_word output is non-empty with no whitespace
                out.push(EntityString { text: word, source });
            }
        }
        if out.is_empty() {
            return Err(ExtractError::NoEntities(text.to_string()));
        }
        Ok(out)
    }
}
