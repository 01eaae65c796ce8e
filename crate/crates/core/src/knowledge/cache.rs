//! Offline knowledge cache: one record per edited fact holding the cloze,
//! the induced parametric fact and both entity sets.
//!
//! On disk the cache is UTF-8 JSON lines, one record per line, each with a
//! mandatory `version` field. See `docs/protocol.md`.

use std::collections::HashMap;
use std::path::Path;

use chrono::{DateTime, Utc};
use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::extract::{EntityExtractor, ExtractInput};
use super::{build_cloze, fill_cloze, EditMemory, EntitySet, FactRecord};
use crate::biaser::BiasConfig;
use crate::decode::{decode, DecodeError, DecodeOptions, ModelBackend};
use crate::entity_match::{EntityString, KnowledgeSource};
use crate::jsonl;

pub const CACHE_VERSION: u64 = 1;

const INDUCTION_MAX_TOKENS: usize = 16;

const REQUIRED_FIELDS: [&str; 6] = [
    "fact_id",
    "cloze",
    "parametric_fact",
    "new_entities",
    "para_entities",
    "created_at",
];

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: missing required field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: field `{field}`: {msg}")]
    InvalidField {
        line: usize,
        field: &'static str,
        msg: String,
    },
    #[error("line {line}: unsupported cache version {found} (expected {CACHE_VERSION})")]
    Version { line: usize, found: u64 },
    #[error("line {line}: duplicate fact_id {id:?}")]
    DuplicateFactId { line: usize, id: String },
}

#[derive(Debug, Error)]
pub enum InductionError {
    #[error("empty cloze")]
    EmptyCloze,
    #[error("backend failed while inducing {cloze:?}: {source}")]
    Backend {
        cloze: String,
        #[source]
        source: DecodeError,
    },
    #[error("induction produced no entity for {0:?}")]
    NoEntity(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeCacheRecord {
    pub fact_id: String,
    pub cloze: String,
    /// Source objects, kept for the consistency check on load.
    pub new_object: Option<String>,
    pub parametric_object: Option<String>,
    pub parametric_fact: String,
    pub entities: EntitySet,
    pub created_at: DateTime<Utc>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    version: u64,
    fact_id: String,
    cloze: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    new_object: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parametric_object: Option<String>,
    parametric_fact: String,
    new_entities: Vec<String>,
    para_entities: Vec<String>,
    created_at: DateTime<Utc>,
}

impl From<&KnowledgeCacheRecord> for CacheLine {
    fn from(r: &KnowledgeCacheRecord) -> Self {
        Self {
            version: CACHE_VERSION,
            fact_id: r.fact_id.clone(),
            cloze: r.cloze.clone(),
            new_object: r.new_object.clone(),
            parametric_object: r.parametric_object.clone(),
            parametric_fact: r.parametric_fact.clone(),
            new_entities: r.entities.new_words().iter().map(|s| s.to_string()).collect(),
            para_entities: r.entities.para_words().iter().map(|s| s.to_string()).collect(),
            created_at: r.created_at,
        }
    }
}

/// Cache records indexed by fact id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeCache {
    records: Vec<KnowledgeCacheRecord>,
    index: HashMap<String, usize>,
}

impl KnowledgeCache {
    /// Later duplicates of a fact id replace earlier ones.
    pub fn from_records(records: Vec<KnowledgeCacheRecord>) -> Self {
        let mut out = Self::default();
        for r in records {
            out.insert(r);
        }
        out
    }

    pub fn insert(&mut self, record: KnowledgeCacheRecord) {
        match self.index.get(&record.fact_id) {
            Some(&i) => self.records[i] = record,
            None => {
                self.index.insert(record.fact_id.clone(), self.records.len());
                self.records.push(record);
            }
        }
    }

    pub fn get(&self, fact_id: &str) -> Option<&KnowledgeCacheRecord> {
        self.index.get(fact_id).map(|&i| &self.records[i])
    }

    pub fn records(&self) -> &[KnowledgeCacheRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Union of the entity sets of every record.
    pub fn all_entities(&self) -> EntitySet {
        let mut set = EntitySet::default();
        for r in &self.records {
            set.merge(&r.entities);
        }
        set
    }
}

pub fn save_cache(path: &Path, records: &[KnowledgeCacheRecord]) -> Result<(), CacheError> {
    let lines: Vec<CacheLine> = records.iter().map(CacheLine::from).collect();
    let tmp = path.with_extension("jsonl.tmp");
    let io = |source| CacheError::Io {
        path: path.display().to_string(),
        source,
    };
    jsonl::write_lines(&tmp, &lines).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

fn check_types(value: &Value, line: usize) -> Result<(), CacheError> {
    let invalid = |field, msg: &str| CacheError::InvalidField {
        line,
        field,
        msg: msg.to_string(),
    };
    for field in ["fact_id", "cloze", "parametric_fact", "created_at"] {
        if !value[field].is_string() {
            return Err(invalid(field, "expected a string"));
        }
    }
    for field in ["new_entities", "para_entities"] {
        let ok = value[field]
            .as_array()
            .is_some_and(|a| a.iter().all(Value::is_string));
        if !ok {
            return Err(invalid(field, "expected an array of strings"));
        }
    }
    for field in ["new_object", "parametric_object"] {
        if !(value[field].is_null() || value[field].is_string()) {
            return Err(invalid(field, "expected a string"));
        }
    }
    Ok(())
}

fn parse_line(text: &str, line: usize) -> Result<KnowledgeCacheRecord, CacheError> {
    let value: Value = serde_json::from_str(text).map_err(|e| CacheError::Parse {
        line,
        msg: e.to_string(),
    })?;
    if !value.is_object() {
        return Err(CacheError::Parse {
            line,
            msg: "expected a JSON object".into(),
        });
    }
    let version = match value.get("version") {
        None | Some(Value::Null) => {
            return Err(CacheError::MissingField {
                line,
                field: "version",
            })
        }
        Some(v) => v.as_u64().ok_or_else(|| CacheError::InvalidField {
            line,
            field: "version",
            msg: "expected a non-negative integer".into(),
        })?,
    };
    if version != CACHE_VERSION {
        return Err(CacheError::Version {
            line,
            found: version,
        });
    }
    if let Some(field) = jsonl::missing_field(&value, &REQUIRED_FIELDS) {
        return Err(CacheError::MissingField { line, field });
    }
    check_types(&value, line)?;
    let raw: CacheLine = serde_json::from_value(value).map_err(|e| CacheError::InvalidField {
        line,
        field: "created_at",
        msg: e.to_string(),
    })?;
    let entities = EntitySet::from_words(&raw.new_entities, &raw.para_entities).map_err(|e| {
        CacheError::InvalidField {
            line,
            field: "new_entities",
            msg: e.to_string(),
        }
    })?;
    if entities.new_entities.len() != raw.new_entities.len()
        || entities.para_entities.len() != raw.para_entities.len()
    {
        return Err(CacheError::InvalidField {
            line,
            field: "new_entities",
            msg: "entity lists must not contain duplicates".into(),
        });
    }
    Ok(KnowledgeCacheRecord {
        fact_id: raw.fact_id,
        cloze: raw.cloze,
        new_object: raw.new_object,
        parametric_object: raw.parametric_object,
        parametric_fact: raw.parametric_fact,
        entities,
        created_at: raw.created_at,
    })
}

/// Warns when stored entity lists differ from what the default extractor
/// yields for the stored objects.
fn check_consistency(record: &KnowledgeCacheRecord, extractor: &dyn EntityExtractor) {
    let pairs = [
        (&record.new_object, record.entities.new_words(), KnowledgeSource::NewKnowledge),
        (
            &record.parametric_object,
            record.entities.para_words(),
            KnowledgeSource::ParametricKnowledge,
        ),
    ];
    for (object, stored, source) in pairs {
        let Some(object) = object else { continue };
        let fresh = extractor
            .extract(ExtractInput::Object(object), source)
            .map(|v| v.into_iter().map(|e| e.text).collect::<Vec<_>>())
            .unwrap_or_default();
        if fresh != stored {
            warn!(
                "cache record {:?}: stored {:?} entities {:?} differ from extracted {:?}",
                record.fact_id, source, stored, fresh
            );
        }
    }
}

pub fn load_cache(path: &Path) -> Result<Vec<KnowledgeCacheRecord>, CacheError> {
    let lines = jsonl::read_lines(path).map_err(|source| CacheError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let extractor = super::RuleExtractor::default();
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(lines.len());
    for (line, text) in lines {
        let record = parse_line(&text, line)?;
        if !seen.insert(record.fact_id.clone()) {
            return Err(CacheError::DuplicateFactId {
                line,
                id: record.fact_id,
            });
        }
        check_consistency(&record, &extractor);
        out.push(record);
    }
    Ok(out)
}

/// Prompt used to elicit the unedited model's answer for a cloze.
pub fn induction_prompt(cloze: &str) -> String {
    format!("Fill in the blank: {cloze}\nAnswer:")
}

/// Greedy, unbiased completion of the cloze by the backend.
pub fn induce_parametric<B: ModelBackend + ?Sized>(
    backend: &B,
    cloze: &str,
) -> Result<String, InductionError> {
    if cloze.trim().is_empty() {
        return Err(InductionError::EmptyCloze);
    }
    let opts = DecodeOptions {
        max_tokens: INDUCTION_MAX_TOKENS,
        stop_at_newline: true,
        transcript_capacity: 1,
        ..DecodeOptions::default()
    };
    let cfg = BiasConfig::default().control();
    let generation = decode(backend, &induction_prompt(cloze), &EntitySet::default(), &cfg, &opts)
        .map_err(|source| InductionError::Backend {
            cloze: cloze.to_string(),
            source,
        })?;
    let answer = generation.text.trim().trim_end_matches('.').trim().to_string();
    if answer.is_empty() {
        return Err(InductionError::NoEntity(cloze.to_string()));
    }
    Ok(answer)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InductionFailure {
    pub fact_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheBuild {
    /// Sorted by fact id.
    pub records: Vec<KnowledgeCacheRecord>,
    pub failures: Vec<InductionFailure>,
    /// Facts whose parametric answer already equals the new object.
    pub flagged: Vec<String>,
}

fn build_record<B: ModelBackend + ?Sized>(
    fact: &FactRecord,
    backend: &B,
    extractor: &dyn EntityExtractor,
    previous: Option<&KnowledgeCache>,
) -> Result<KnowledgeCacheRecord, String> {
    let cloze = build_cloze(fact).map_err(|e| e.to_string())?;
    if let Some(prev) = previous.and_then(|c| c.get(&fact.id)) {
        let same_para = fact
            .parametric_object
            .as_ref()
            .is_none_or(|p| prev.parametric_object.as_ref() == Some(p));
        if prev.cloze == cloze && prev.new_object.as_deref() == Some(fact.new_object.as_str()) && same_para {
            return Ok(prev.clone());
        }
    }
    let parametric = match &fact.parametric_object {
        Some(p) => p.clone(),
        None => induce_parametric(backend, &cloze).map_err(|e| e.to_string())?,
    };
    let new_entities = extractor
        .extract(ExtractInput::Object(&fact.new_object), KnowledgeSource::NewKnowledge)
        .map_err(|e| e.to_string())?;
    let para_entities: Vec<EntityString> = extractor
        .extract(ExtractInput::Object(&parametric), KnowledgeSource::ParametricKnowledge)
        .map_err(|e| e.to_string())?;
    Ok(KnowledgeCacheRecord {
        fact_id: fact.id.clone(),
        parametric_fact: fill_cloze(&cloze, &parametric),
        cloze,
        new_object: Some(fact.new_object.clone()),
        parametric_object: Some(parametric),
        entities: EntitySet {
            new_entities,
            para_entities,
        },
        created_at: Utc::now(),
    })
}

/// Induces and extracts a cache record for every fact. Records already in
/// `previous` for an unchanged fact are reused as-is. Facts are processed in
/// parallel on the current rayon pool.
pub fn build_cache<B: ModelBackend + ?Sized>(
    memory: &EditMemory,
    backend: &B,
    extractor: &dyn EntityExtractor,
    previous: Option<&KnowledgeCache>,
) -> CacheBuild {
    let results: Vec<(String, Result<KnowledgeCacheRecord, String>)> = memory
        .records()
        .par_iter()
        .map(|fact| (fact.id.clone(), build_record(fact, backend, extractor, previous)))
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (fact_id, result) in results {
        match result {
            Ok(r) => records.push(r),
            Err(reason) => failures.push(InductionFailure { fact_id, reason }),
        }
    }
    records.sort_by(|a, b| a.fact_id.cmp(&b.fact_id));
    failures.sort_by(|a, b| a.fact_id.cmp(&b.fact_id));
    let flagged = records
        .iter()
        .filter(|r| r.entities.parametric_matches_new())
        .map(|r| r.fact_id.clone())
        .collect::<Vec<_>>();
    for id in &flagged {
        warn!("fact {id:?}: parametric answer already matches the edit");
    }
    CacheBuild {
        records,
        failures,
        flagged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::{MockLM, MockScript};
    use crate::knowledge::RuleExtractor;

    fn fact(id: &str, subject: &str, new: &str) -> FactRecord {
        FactRecord::templated(id, subject, "{} was written by [X]", new)
    }

    fn backend() -> MockLM {
        let mut s = MockScript::new();
        s.chain(
            &induction_prompt("Misery was written by _"),
            &["\u{120}Stephen", "\u{120}King"],
            0.9,
        );
        s.chain(&induction_prompt("Emma was written by _"), &["\u{120}Jane", "\u{120}Austen", "."], 0.9);
        MockLM::new(&s).unwrap()
    }

    fn built() -> CacheBuild {
        let memory = EditMemory::full(vec![
            fact("b", "Emma", "Carl Sagan"),
            fact("a", "Misery", "Richard Dawkins"),
            fact("c", "Dune", "Mary Shelley"),
        ])
        .unwrap();
        build_cache(&memory, &backend(), &RuleExtractor::default(), None)
    }

    #[test]
    fn build_induces_and_reports_failures() {
        let b = built();
        let ids: Vec<_> = b.records.iter().map(|r| r.fact_id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        let a = &b.records[0];
        assert_eq!(a.cloze, "Misery was written by _");
        assert_eq!(a.parametric_fact, "Misery was written by Stephen King");
        assert_eq!(a.entities.new_words(), ["richard", "dawkins"]);
        assert_eq!(a.entities.para_words(), ["stephen", "king"]);
        // trailing period trimmed
        assert_eq!(b.records[1].parametric_object.as_deref(), Some("Jane Austen"));
        assert_eq!(b.failures.len(), 1);
        assert_eq!(b.failures[0].fact_id, "c");
    }

    #[test]
    fn rebuild_reuses_unchanged_records() {
        let first = built();
        let prev = KnowledgeCache::from_records(first.records.clone());
        let memory = EditMemory::full(vec![
            fact("a", "Misery", "Richard Dawkins"),
            fact("b", "Emma", "Richard Dawkins"),
        ])
        .unwrap();
        let again = build_cache(&memory, &backend(), &RuleExtractor::default(), Some(&prev));
        assert_eq!(again.records[0], first.records[0]);
        assert_ne!(again.records[1].entities, first.records[1].entities);
    }

    #[test]
    fn explicit_parametric_object_skips_induction() {
        let mut f = fact("x", "Nowhere", "Ann Lee");
        f.parametric_object = Some("Bob Ray".into());
        let memory = EditMemory::full(vec![f]).unwrap();
        let b = build_cache(&memory, &backend(), &RuleExtractor::default(), None);
        assert!(b.failures.is_empty());
        assert_eq!(b.records[0].entities.para_words(), ["bob", "ray"]);
    }

    #[test]
    fn flags_parametric_equal_to_new() {
        let memory = EditMemory::full(vec![fact("a", "Misery", "Stephen King")]).unwrap();
        let b = build_cache(&memory, &backend(), &RuleExtractor::default(), None);
        assert_eq!(b.flagged, ["a"]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let b = built();
        save_cache(&path, &b.records).unwrap();
        assert_eq!(load_cache(&path).unwrap(), b.records);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().all(|l| l.contains("\"version\":1")));
    }

    fn load_text(text: &str) -> Result<Vec<KnowledgeCacheRecord>, CacheError> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, text).unwrap();
        load_cache(&path)
    }

    #[test]
    fn malformed_files_name_line_and_field() {
        let good = r#"{"version":1,"fact_id":"a","cloze":"_ x","parametric_fact":"y x","new_entities":["z"],"para_entities":["y"],"created_at":"2024-01-01T00:00:00Z"}"#;
        assert_eq!(load_text(good).unwrap().len(), 1);

        let no_cloze = good.replace(r#""cloze":"_ x","#, "");
        assert!(matches!(
            load_text(&format!("{good}\n{no_cloze}")),
            Err(CacheError::MissingField { line: 2, field: "cloze" })
        ));
        let v2 = good.replace(r#""version":1"#, r#""version":2"#);
        assert!(matches!(load_text(&v2), Err(CacheError::Version { line: 1, found: 2 })));
        let no_version = good.replace(r#""version":1,"#, "");
        assert!(matches!(
            load_text(&no_version),
            Err(CacheError::MissingField { field: "version", .. })
        ));
        let bad_list = good.replace(r#"["z"]"#, r#""z""#);
        assert!(matches!(
            load_text(&bad_list),
            Err(CacheError::InvalidField { field: "new_entities", .. })
        ));
        let bad_entity = good.replace(r#"["z"]"#, r#"["two words"]"#);
        assert!(matches!(
            load_text(&bad_entity),
            Err(CacheError::InvalidField { field: "new_entities", .. })
        ));
        let bad_time = good.replace("2024-01-01T00:00:00Z", "yesterday");
        assert!(matches!(
            load_text(&bad_time),
            Err(CacheError::InvalidField { field: "created_at", .. })
        ));
        assert!(matches!(load_text("{oops"), Err(CacheError::Parse { line: 1, .. })));
        assert!(matches!(
            load_text(&format!("{good}\n\n{good}")),
            Err(CacheError::DuplicateFactId { line: 3, .. })
        ));
    }
}
