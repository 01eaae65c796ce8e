//! Dataset adapters for MQuAKE-style and CounterFact-style JSON lines.
//!
//! Field mappings are listed in `docs/protocol.md`. Records that fail
//! validation are skipped and reported with their line number.

use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::jsonl;
use crate::knowledge::{FactRecord, OBJECT_SLOT, SUBJECT_SLOT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    MquakeLike,
    CounterfactLike,
}

impl FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "mquake" | "mquake_like" => Ok(Self::MquakeLike),
            "counterfact" | "counterfact_like" => Ok(Self::CounterfactLike),
            _ => Err(format!("unknown dataset format {s:?} (expected mquake or counterfact)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub id: String,
    /// Paraphrases of one question.
    pub questions: Vec<String>,
    pub edits: Vec<FactRecord>,
    pub gold_answer: String,
    pub answer_aliases: Vec<String>,
    pub hop_count: usize,
}

impl EvalInstance {
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.questions.is_empty() || self.questions.iter().any(|q| q.trim().is_empty()) {
            return Err("needs at least one non-empty question".into());
        }
        if self.gold_answer.trim().is_empty() {
            return Err("empty gold answer".into());
        }
        if self.hop_count == 0 {
            return Err("hop_count must be positive".into());
        }
        for e in &self.edits {
            e.validate().map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub instances: Vec<EvalInstance>,
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: zero valid instances ({} malformed records)", diagnostics.len())]
    NoValidInstances {
        path: String,
        diagnostics: Vec<Diagnostic>,
    },
}

fn str_field<'a>(v: &'a Value, field: &str) -> Result<&'a str, String> {
    match v.get(field) {
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(s),
        Some(Value::String(_)) => Err(format!("field `{field}` is empty")),
        Some(_) => Err(format!("field `{field}` must be a string")),
        None => Err(format!("missing field `{field}`")),
    }
}

fn str_list(v: &Value, field: &str) -> Result<Vec<String>, String> {
    match v.get(field) {
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(Value::Array(items)) => items
            .iter()
            .map(|i| {
                i.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| format!("field `{field}` must hold strings"))
            })
            .collect(),
        Some(_) => Err(format!("field `{field}` must be an array")),
    }
}

fn case_id(v: &Value) -> Result<String, String> {
    match v.get("case_id") {
        Some(Value::String(s)) if !s.is_empty() => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        Some(_) => Err("field `case_id` must be a string or number".into()),
        None => Err("missing field `case_id`".into()),
    }
}

fn target_str<'a>(rewrite: &'a Value, field: &str) -> Result<&'a str, String> {
    let target = rewrite
        .get(field)
        .ok_or_else(|| format!("requested_rewrite: missing field `{field}`"))?;
    str_field(target, "str").map_err(|e| format!("requested_rewrite.{field}: {e}"))
}

/// `{prompt, subject, target_new: {str}}` into a templated fact. The
/// original answer (`target_true`) is not used; parametric answers come
/// from the model at cache-build time.
fn rewrite_to_fact(rewrite: &Value, id: String) -> Result<FactRecord, String> {
    let prompt = str_field(rewrite, "prompt").map_err(|e| format!("requested_rewrite: {e}"))?;
    let subject = str_field(rewrite, "subject").map_err(|e| format!("requested_rewrite: {e}"))?;
    let new_object = target_str(rewrite, "target_new")?;
    if !prompt.contains(SUBJECT_SLOT) {
        return Err("requested_rewrite.prompt must contain `{}`".into());
    }
    let template = format!("{} {OBJECT_SLOT}", prompt.trim_end());
    let fact = FactRecord::templated(&id, subject, &template, new_object);
    fact.validate().map_err(|e| e.to_string())?;
    Ok(fact)
}

fn parse_mquake(v: &Value) -> Result<EvalInstance, String> {
    let id = case_id(v)?;
    let rewrites = match v.get("requested_rewrite") {
        Some(Value::Array(r)) if !r.is_empty() => r,
        Some(Value::Array(_)) => return Err("requested_rewrite is empty".into()),
        Some(_) => return Err("requested_rewrite must be an array".into()),
        None => return Err("missing field `requested_rewrite`".into()),
    };
    let edits = rewrites
        .iter()
        .enumerate()
        .map(|(i, r)| rewrite_to_fact(r, format!("{id}:{i}")))
        .collect::<Result<Vec<_>, _>>()?;
    let questions = str_list(v, "questions")?;
    let hops = match v.get("new_single_hops") {
        Some(Value::Array(h)) if !h.is_empty() => h.len(),
        _ => edits.len(),
    };
    Ok(EvalInstance {
        id,
        questions,
        edits,
        gold_answer: str_field(v, "new_answer")?.to_string(),
        answer_aliases: str_list(v, "new_answer_alias")?,
        hop_count: hops,
    })
}

fn parse_counterfact(v: &Value) -> Result<EvalInstance, String> {
    let id = case_id(v)?;
    let rewrite = match v.get("requested_rewrite") {
        Some(Value::Array(r)) if r.len() == 1 => &r[0],
        Some(Value::Array(_)) => return Err("requested_rewrite must hold exactly one edit".into()),
        Some(r @ Value::Object(_)) => r,
        Some(_) => return Err("requested_rewrite must be an object".into()),
        None => return Err("missing field `requested_rewrite`".into()),
    };
    let fact = rewrite_to_fact(rewrite, format!("{id}:0"))?;
    let prompt = str_field(rewrite, "prompt").map_err(|e| format!("requested_rewrite: {e}"))?;
    let mut questions = vec![prompt.replace(SUBJECT_SLOT, &fact.subject)];
    questions.extend(str_list(v, "paraphrase_prompts")?);
    Ok(EvalInstance {
        id,
        questions,
        gold_answer: fact.new_object.clone(),
        edits: vec![fact],
        answer_aliases: Vec::new(),
        hop_count: 1,
    })
}

/// Reads a dataset, keeping valid records and reporting the rest.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<LoadedDataset, DatasetError> {
    let shown = path.display().to_string();
    let lines = jsonl::read_lines(path).map_err(|source| DatasetError::Io {
        path: shown.clone(),
        source,
    })?;
    let mut instances = Vec::new();
    let mut diagnostics = Vec::new();
    let mut seen = HashSet::new();
    for (line, text) in lines {
        let parsed = serde_json::from_str::<Value>(&text)
            .map_err(|e| format!("malformed JSON: {e}"))
            .and_then(|v| match format {
                DatasetFormat::MquakeLike => parse_mquake(&v),
                DatasetFormat::CounterfactLike => parse_counterfact(&v),
            })
            .and_then(|inst| inst.validate().map(|_| inst))
            .and_then(|inst| {
                if seen.insert(inst.id.clone()) {
                    Ok(inst)
                } else {
                    Err(format!("duplicate case_id {:?}", inst.id))
                }
            });
        match parsed {
            Ok(inst) => instances.push(inst),
            Err(message) => {
                log::warn!("{shown}:{line}: {message}");
                diagnostics.push(Diagnostic { line, message });
            }
        }
    }
    if instances.is_empty() {
        return Err(DatasetError::NoValidInstances {
            path: shown,
            diagnostics,
        });
    }
    Ok(LoadedDataset {
        instances,
        diagnostics,
    })
}

fn instance_to_mquake(inst: &EvalInstance) -> Result<Value, String> {
    let rewrites = inst
        .edits
        .iter()
        .map(|f| {
            let template = f
                .relation_template
                .as_deref()
                .ok_or_else(|| format!("fact {:?} has no relation template", f.id))?;
            let prompt = template
                .strip_suffix(OBJECT_SLOT)
                .ok_or_else(|| format!("fact {:?}: template must end with {OBJECT_SLOT}", f.id))?
                .trim_end();
            let mut r = json!({
                "prompt": prompt,
                "subject": f.subject,
                "target_new": {"str": f.new_object},
            });
            if let Some(p) = &f.parametric_object {
                r["target_true"] = json!({"str": p});
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>, String>>()?;
    Ok(json!({
        "case_id": inst.id,
        "requested_rewrite": rewrites,
        "questions": inst.questions,
        "new_answer": inst.gold_answer,
        "new_answer_alias": inst.answer_aliases,
        "new_single_hops": vec![json!({}); inst.hop_count],
    }))
}

/// Writes instances as MQuAKE-style lines. Every edit must use a template
/// that ends with the object slot.
pub fn save_mquake_like(path: &Path, instances: &[EvalInstance]) -> std::io::Result<()> {
    let values = instances
        .iter()
        .map(instance_to_mquake)
        .collect::<Result<Vec<_>, _>>()
        .map_err(std::io::Error::other)?;
    jsonl::write_lines(path, &values)
}
