//! Edited facts, their cloze forms, entity sets, the offline knowledge cache
//! and lexical retrieval from the edit memory.

mod cache;
mod extract;

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entity_match::{EntityString, KnowledgeSource, MatchError};
use crate::jsonl;

pub use cache::{
    build_cache, induce_parametric, induction_prompt, load_cache, save_cache, CacheBuild,
    CacheError, InductionError, InductionFailure, KnowledgeCache, KnowledgeCacheRecord,
    CACHE_VERSION,
};
pub use extract::{EntityExtractor, ExtractError, ExtractInput, RuleExtractor, StopList};

/// Object slot in a relation template.
pub const OBJECT_SLOT: &str = "[X]";
/// Optional subject placeholder in a relation template.
pub const SUBJECT_SLOT: &str = "{}";
/// What the object slot becomes in a cloze.
pub const BLANK: &str = "_";

#[derive(Debug, Error)]
pub enum FactError {
    #[error("fact {id:?}: {msg}")]
    Invalid { id: String, msg: String },
    #[error("fact {0:?}: cannot locate object span")]
    ObjectSpanNotFound(String),
    #[error("batch size {batch} exceeds memory size {len}")]
    BatchTooLarge { batch: usize, len: usize },
    #[error("batch size must be positive")]
    ZeroBatch,
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// An edited fact. Either `relation_template` (with exactly one `[X]`) or
/// `raw_text` must be present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactRecord {
    pub id: String,
    pub subject: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation_template: Option<String>,
    pub new_object: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parametric_object: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
}

impl FactRecord {
    pub fn templated(id: &str, subject: &str, template: &str, new_object: &str) -> Self {
        Self {
            id: id.to_string(),
            subject: subject.to_string(),
            relation_template: Some(template.to_string()),
            new_object: new_object.to_string(),
            parametric_object: None,
            raw_text: None,
        }
    }

    pub fn validate(&self) -> Result<(), FactError> {
        let invalid = |msg: &str| FactError::Invalid {
            id: self.id.clone(),
            msg: msg.to_string(),
        };
        if self.id.trim().is_empty() {
            return Err(invalid("empty id"));
        }
        if self.new_object.trim().is_empty() {
            return Err(invalid("empty new_object"));
        }
        match (&self.relation_template, &self.raw_text) {
            (Some(t), _) if t.matches(OBJECT_SLOT).count() != 1 => {
                Err(invalid("relation_template must contain [X] exactly once"))
            }
            (None, None) => Err(invalid("needs relation_template or raw_text")),
            _ => Ok(()),
        }
    }

    fn fill(&self, object: &str) -> Result<String, FactError> {
        self.validate()?;
        if let Some(t) = &self.relation_template {
            return Ok(t.replace(SUBJECT_SLOT, &self.subject).replacen(OBJECT_SLOT, object, 1));
        }
        let raw = self.raw_text.as_deref().unwrap_or_default();
        if !raw.contains(self.new_object.as_str()) {
            return Err(FactError::ObjectSpanNotFound(self.id.clone()));
        }
        Ok(raw.replacen(self.new_object.as_str(), object, 1))
    }

    /// The edited fact as a sentence.
    pub fn new_fact(&self) -> Result<String, FactError> {
        self.fill(&self.new_object)
    }

    /// Words of the edited sentence, normalized, for retrieval.
    fn retrieval_words(&self) -> BTreeSet<String> {
        match self.new_fact() {
            Ok(text) => word_set(&text),
            Err(_) => word_set(&format!("{} {}", self.subject, self.new_object)),
        }
    }
}

/// The fact with its object replaced by a blank.
pub fn build_cloze(fact: &FactRecord) -> Result<String, FactError> {
    fact.fill(BLANK)
}

/// Fills the blank of a cloze with `object`.
pub fn fill_cloze(cloze: &str, object: &str) -> String {
    cloze.replacen(BLANK, object, 1)
}

/// New-knowledge and parametric-knowledge entity words.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EntitySet {
    pub new_entities: Vec<EntityString>,
    pub para_entities: Vec<EntityString>,
}

impl EntitySet {
    /// Builds a set from already-normalized words.
    pub fn from_words<N, P>(new: N, para: P) -> Result<Self, MatchError>
    where
        N: IntoIterator,
        N::Item: AsRef<str>,
        P: IntoIterator,
        P::Item: AsRef<str>,
    {
        let mk = |words: Vec<String>, src| {
            words
                .into_iter()
                .map(|w| EntityString::new(w, src))
                .collect::<Result<Vec<_>, _>>()
        };
        let new: Vec<String> = new.into_iter().map(|w| w.as_ref().to_string()).collect();
        let para: Vec<String> = para.into_iter().map(|w| w.as_ref().to_string()).collect();
        let mut set = Self {
            new_entities: mk(new, KnowledgeSource::NewKnowledge)?,
            para_entities: mk(para, KnowledgeSource::ParametricKnowledge)?,
        };
        set.dedup();
        Ok(set)
    }

    fn dedup(&mut self) {
        for list in [&mut self.new_entities, &mut self.para_entities] {
            let mut seen = HashSet::new();
            list.retain(|e| seen.insert(e.text.clone()));
        }
    }

    /// Union preserving first-seen order.
    pub fn merge(&mut self, other: &EntitySet) {
        self.new_entities.extend(other.new_entities.iter().cloned());
        self.para_entities.extend(other.para_entities.iter().cloned());
        self.dedup();
    }

    pub fn len(&self) -> usize {
        self.new_entities.len() + self.para_entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// New and parametric words coincide (the model already "knows" the
    /// edit, so the two adjustments partly cancel).
    pub fn parametric_matches_new(&self) -> bool {
        let a: BTreeSet<&str> = self.new_entities.iter().map(|e| e.text.as_str()).collect();
        let b: BTreeSet<&str> = self.para_entities.iter().map(|e| e.text.as_str()).collect();
        !a.is_empty() && a == b
    }

    pub fn new_words(&self) -> Vec<&str> {
        self.new_entities.iter().map(|e| e.text.as_str()).collect()
    }

    pub fn para_words(&self) -> Vec<&str> {
        self.para_entities.iter().map(|e| e.text.as_str()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSize {
    Full,
    Count(usize),
}

impl std::str::FromStr for BatchSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(BatchSize::Full);
        }
        match s.parse::<usize>() {
            Ok(0) | Err(_) => Err(format!("batch size must be a positive integer or 'full', got {s:?}")),
            Ok(n) => Ok(BatchSize::Count(n)),
        }
    }
}

impl std::fmt::Display for BatchSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BatchSize::Full => write!(f, "full"),
            BatchSize::Count(n) => write!(f, "{n}"),
        }
    }
}

/// Retrievable edited facts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditMemory {
    records: Vec<FactRecord>,
    batch_size: BatchSize,
}

impl EditMemory {
    pub fn new(records: Vec<FactRecord>, batch_size: BatchSize) -> Result<Self, FactError> {
        for r in &records {
            r.validate()?;
        }
        match batch_size {
            BatchSize::Count(0) => return Err(FactError::ZeroBatch),
            BatchSize::Count(n) if n > records.len() => {
                return Err(FactError::BatchTooLarge {
                    batch: n,
                    len: records.len(),
                })
            }
            _ => {}
        }
        Ok(Self {
            records,
            batch_size,
        })
    }

    pub fn full(records: Vec<FactRecord>) -> Result<Self, FactError> {
        Self::new(records, BatchSize::Full)
    }

    pub fn records(&self) -> &[FactRecord] {
        &self.records
    }

    pub fn batch_size(&self) -> BatchSize {
        self.batch_size
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Reads a line-delimited edit-memory file.
    pub fn load(path: &Path, batch_size: BatchSize) -> Result<Self, FactError> {
        let shown = path.display().to_string();
        let lines = jsonl::read_lines(path).map_err(|source| FactError::Io {
            path: shown.clone(),
            source,
        })?;
        let mut records = Vec::with_capacity(lines.len());
        for (line, text) in lines {
            let parse_err = |msg: String| FactError::Parse {
                path: shown.clone(),
                line,
                msg,
            };
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
            if let Some(field) = jsonl::missing_field(&value, &["id", "subject", "new_object"]) {
                return Err(parse_err(format!("missing field `{field}`")));
            }
            let record: FactRecord =
                serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?;
            record.validate().map_err(|e| parse_err(e.to_string()))?;
            records.push(record);
        }
        Self::new(records, batch_size)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        jsonl::write_lines(path, &self.records)
    }
}

/// Lowercased alphanumeric words.
pub(crate) fn word_set(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn word_jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Top `limit` records by word-level Jaccard between the question and each
/// record's edited sentence. Ties go to the smaller fact id.
pub fn retrieve_facts<'m>(
    memory: &'m EditMemory,
    question: &str,
    limit: usize,
) -> Vec<&'m FactRecord> {
    let q = word_set(question);
    let mut scored: Vec<(f64, &FactRecord)> = memory
        .records
        .iter()
        .map(|r| (word_jaccard(&q, &r.retrieval_words()), r))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
    scored.into_iter().take(limit).map(|(_, r)| r).collect()
}
