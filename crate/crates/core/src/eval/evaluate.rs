//! Editing-accuracy evaluation with a biased and a control arm.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use super::dataset::EvalInstance;
use super::judge::{ContainmentJudge, Judge};
use super::stats::{entity_prob_stats, ArmStats, EntityStats};
use crate::biaser::BiasConfig;
use crate::decode::{decode, DecodeOptions, Generation, ModelBackend, Transcript};
use crate::knowledge::{
    build_cache, retrieve_facts, BatchSize, CacheBuild, EditMemory, EntityExtractor, EntitySet,
    FactError, FactRecord, KnowledgeCache,
};

pub const DEFAULT_RETRIEVE_LIMIT: usize = 4;
pub const DEFAULT_ANSWER_TOKENS: usize = 16;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no instances to evaluate")]
    NoInstances,
    #[error("edit {0:?} has no knowledge cache record")]
    MissingCache(String),
    #[error("duplicate edit id {0:?} across instances")]
    DuplicateEdit(String),
    #[error(transparent)]
    Memory(#[from] FactError),
    #[error("invalid configuration: {0}")]
    Config(#[from] crate::biaser::BiasError),
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub bias: BiasConfig,
    /// Instances whose edits share one memory (`Full` = all of them).
    pub batch: BatchSize,
    pub retrieve_limit: usize,
    pub decode: DecodeOptions,
    pub run_control: bool,
    /// Wall-clock timing. Off by default so reports are reproducible.
    pub measure_timing: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bias: BiasConfig::default(),
            batch: BatchSize::Count(1),
            retrieve_limit: DEFAULT_RETRIEVE_LIMIT,
            decode: DecodeOptions {
                max_tokens: DEFAULT_ANSWER_TOKENS,
                stop_at_newline: true,
                ..DecodeOptions::default()
            },
            run_control: true,
            measure_timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmVerdict {
    pub correct: bool,
    /// Answer to the first question judged correct, else to the last one.
    pub answer: String,
    pub question_index: usize,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub id: String,
    pub hop_count: usize,
    pub correct: bool,
    pub biased: ArmVerdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control: Option<ArmVerdict>,
    /// A head token matched a parametric entity during the biased run.
    pub para_match_in_head: bool,
    pub retrieved: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub latency_ms_per_token: f64,
    pub throughput_tokens_per_s: f64,
    pub control_latency_ms_per_token: f64,
    pub overhead_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReportConfig {
    pub n: usize,
    pub alpha: f64,
    pub k: usize,
    pub lambda_new: f64,
    pub lambda_para: f64,
}

impl From<&BiasConfig> for ReportConfig {
    fn from(c: &BiasConfig) -> Self {
        Self {
            n: c.n,
            alpha: c.filter.alpha,
            k: c.filter.k,
            lambda_new: c.lambda_new,
            lambda_para: c.lambda_para,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub config: ReportConfig,
    pub batch: String,
    pub instances: usize,
    pub correct: usize,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control_correct: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control_accuracy: Option<f64>,
    /// Instances whose decode failed (counted incorrect).
    pub errors: usize,
    pub verdicts: Vec<Verdict>,
    pub entity_stats: EntityStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Plain-text summary table.
    pub fn summary(&self) -> String {
        let mut out = format!(
            "instances {}  batch {}  n={} alpha={} k={} lambda_new={} lambda_para={}\n",
            self.instances,
            self.batch,
            self.config.n,
            self.config.alpha,
            self.config.k,
            self.config.lambda_new,
            self.config.lambda_para
        );
        out += &format!("{:<10}{:>10}{:>10}\n", "arm", "correct", "accuracy");
        out += &format!("{:<10}{:>10}{:>10.4}\n", "biased", self.correct, self.accuracy);
        if let (Some(c), Some(a)) = (self.control_correct, self.control_accuracy) {
            out += &format!("{:<10}{:>10}{:>10.4}\n", "control", c, a);
        }
        if self.errors > 0 {
            out += &format!("decode errors: {}\n", self.errors);
        }
        if let Some(t) = &self.timing {
            out += &format!(
                "latency {:.4} ms/token  throughput {:.1} tokens/s  overhead {:.3}x\n",
                t.latency_ms_per_token, t.throughput_tokens_per_s, t.overhead_ratio
            );
        }
        out
    }
}

/// Builds cache records for every edit of every instance.
pub fn prepare_cache<B: ModelBackend + ?Sized>(
    instances: &[EvalInstance],
    backend: &B,
    extractor: &dyn EntityExtractor,
    previous: Option<&KnowledgeCache>,
) -> Result<CacheBuild, EvalError> {
    let edits: Vec<FactRecord> = instances.iter().flat_map(|i| i.edits.iter().cloned()).collect();
    let memory = EditMemory::full(edits)?;
    Ok(build_cache(&memory, backend, extractor, previous))
}

/// The ICE prompt: retrieved facts followed by the question.
pub fn eval_prompt(facts: &[&FactRecord], question: &str) -> String {
    let sentences: Vec<String> = facts.iter().filter_map(|f| f.new_fact().ok()).collect();
    if sentences.is_empty() {
        format!("Question: {question}\nAnswer:")
    } else {
        format!("Imagine that {}.\nQuestion: {question}\nAnswer:", sentences.join(". "))
    }
}

/// Both transcripts saw the same raw distributions at every step up to and
/// including the first step whose chosen tokens differ.
pub fn shared_prefix_consistent(a: &Transcript, b: &Transcript) -> bool {
    for (x, y) in a.steps().zip(b.steps()) {
        if x.raw != y.raw {
            return false;
        }
        if x.chosen != y.chosen {
            return true;
        }
    }
    true
}

struct ArmRun {
    verdict: ArmVerdict,
    transcripts: Vec<Transcript>,
    para_match: bool,
    tokens: usize,
    elapsed: Duration,
}

fn run_arm<B: ModelBackend + ?Sized>(
    backend: &B,
    instance: &EvalInstance,
    prompts: &[String],
    entities: &EntitySet,
    bias: &BiasConfig,
    opts: &DecodeOptions,
    judge: &dyn Judge,
) -> ArmRun {
    let mut run = ArmRun {
        verdict: ArmVerdict {
            correct: false,
            answer: String::new(),
            question_index: 0,
            steps: 0,
            error: None,
        },
        transcripts: Vec::new(),
        para_match: false,
        tokens: 0,
        elapsed: Duration::ZERO,
    };
    for (qi, prompt) in prompts.iter().enumerate() {
        let start = Instant::now();
        let result = decode(backend, prompt, entities, bias, opts);
        run.elapsed += start.elapsed();
        run.verdict.question_index = qi;
        match result {
            Ok(Generation {
                text, transcript, ..
            }) => {
                run.verdict.steps += transcript.total_steps();
                run.tokens += transcript.total_steps();
                run.para_match |= transcript.any_para_match();
                run.transcripts.push(transcript);
                run.verdict.correct = judge.judge(&text, instance);
                run.verdict.answer = text;
                run.verdict.error = None;
                if run.verdict.correct {
                    break;
                }
            }
            Err(e) => {
                if let Some(p) = e.partial() {
                    run.verdict.steps += p.total_steps();
                    run.para_match |= p.any_para_match();
                }
                run.verdict.answer.clear();
                run.verdict.error = Some(e.to_string());
            }
        }
    }
    run
}

fn refs(r: &ArmRun) -> Vec<&Transcript> {
    r.transcripts.iter().collect()
}

struct InstanceResult {
    verdict: Verdict,
    biased_stats: ArmStats,
    control_stats: ArmStats,
    biased_tokens: usize,
    biased_time: Duration,
    control_tokens: usize,
    control_time: Duration,
}

fn evaluate_instance<B: ModelBackend + ?Sized>(
    instance: &EvalInstance,
    memory: &EditMemory,
    backend: &B,
    cache: &KnowledgeCache,
    cfg: &EvalConfig,
    judge: &dyn Judge,
) -> InstanceResult {
    let mut retrieved_ids = Vec::new();
    let mut entities = EntitySet::default();
    let mut prompts = Vec::with_capacity(instance.questions.len());
    for q in &instance.questions {
        let facts = retrieve_facts(memory, q, cfg.retrieve_limit);
        for f in &facts {
            if let Some(rec) = cache.get(&f.id) {
                entities.merge(&rec.entities);
            }
            if !retrieved_ids.contains(&f.id) {
                retrieved_ids.push(f.id.clone());
            }
        }
        prompts.push(eval_prompt(&facts, q));
    }

    let biased = run_arm(backend, instance, &prompts, &entities, &cfg.bias, &cfg.decode, judge);
    let control = cfg.run_control.then(|| {
        run_arm(
            backend,
            instance,
            &prompts,
            &entities,
            &cfg.bias.control(),
            &cfg.decode,
            judge,
        )
    });
    let biased_stats = entity_prob_stats(&refs(&biased), &entities);
    let control_stats = control
        .as_ref()
        .map(|c| entity_prob_stats(&refs(c), &entities))
        .unwrap_or_default();
    InstanceResult {
        verdict: Verdict {
            id: instance.id.clone(),
            hop_count: instance.hop_count,
            correct: biased.verdict.correct,
            para_match_in_head: biased.para_match,
            retrieved: retrieved_ids,
            control: control.as_ref().map(|c| c.verdict.clone()),
            biased: biased.verdict.clone(),
        },
        biased_stats,
        control_stats,
        biased_tokens: biased.tokens,
        biased_time: biased.elapsed,
        control_tokens: control.as_ref().map_or(0, |c| c.tokens),
        control_time: control.as_ref().map_or(Duration::ZERO, |c| c.elapsed),
    }
}

/// Memories for each instance under the batch regime.
fn memories(instances: &[EvalInstance], batch: BatchSize) -> Result<Vec<(usize, EditMemory)>, EvalError> {
    let group = match batch {
        BatchSize::Full => instances.len(),
        BatchSize::Count(n) => n.clamp(1, instances.len()),
    };
    let mut out = Vec::new();
    for (g, chunk) in instances.chunks(group).enumerate() {
        let edits: Vec<FactRecord> = chunk.iter().flat_map(|i| i.edits.iter().cloned()).collect();
        let memory = EditMemory::full(edits)?;
        for i in 0..chunk.len() {
            out.push((g * group + i, memory.clone()));
        }
    }
    Ok(out)
}

/// Runs every instance with the biased configuration (and the control arm
/// when enabled) on the current rayon pool.
pub fn evaluate<B: ModelBackend + ?Sized>(
    instances: &[EvalInstance],
    backend: &B,
    cache: &KnowledgeCache,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    evaluate_with_judge(instances, backend, cache, cfg, &ContainmentJudge)
}

pub fn evaluate_with_judge<B: ModelBackend + ?Sized>(
    instances: &[EvalInstance],
    backend: &B,
    cache: &KnowledgeCache,
    cfg: &EvalConfig,
    judge: &dyn Judge,
) -> Result<EvalReport, EvalError> {
    if instances.is_empty() {
        return Err(EvalError::NoInstances);
    }
    cfg.bias.validate()?;
    let mut seen = std::collections::HashSet::new();
    for edit in instances.iter().flat_map(|i| &i.edits) {
        if !seen.insert(edit.id.as_str()) {
            return Err(EvalError::DuplicateEdit(edit.id.clone()));
        }
        if cache.get(&edit.id).is_none() {
            return Err(EvalError::MissingCache(edit.id.clone()));
        }
    }
    let memories = memories(instances, cfg.batch)?;
    let results: Vec<InstanceResult> = memories
        .par_iter()
        .map(|(i, memory)| evaluate_instance(&instances[*i], memory, backend, cache, cfg, judge))
        .collect();

    let mut stats = EntityStats::default();
    let mut verdicts = Vec::with_capacity(results.len());
    let (mut bt, mut bd, mut ct, mut cd) = (0usize, Duration::ZERO, 0usize, Duration::ZERO);
    for r in results {
        stats.biased.merge(&r.biased_stats);
        stats.control.merge(&r.control_stats);
        bt += r.biased_tokens;
        bd += r.biased_time;
        ct += r.control_tokens;
        cd += r.control_time;
        verdicts.push(r.verdict);
    }
    let n = verdicts.len();
    let correct = verdicts.iter().filter(|v| v.correct).count();
    let control_correct = cfg
        .run_control
        .then(|| verdicts.iter().filter(|v| v.control.as_ref().is_some_and(|c| c.correct)).count());
    let errors = verdicts.iter().filter(|v| v.biased.error.is_some()).count();
    let timing = (cfg.measure_timing && bt > 0).then(|| {
        let ms = bd.as_secs_f64() * 1e3 / bt as f64;
        let control_ms = if ct > 0 { cd.as_secs_f64() * 1e3 / ct as f64 } else { 0.0 };
        Timing {
            latency_ms_per_token: ms,
            throughput_tokens_per_s: if ms > 0.0 { 1e3 / ms } else { 0.0 },
            control_latency_ms_per_token: control_ms,
            overhead_ratio: if control_ms > 0.0 { ms / control_ms } else { 1.0 },
        }
    });
    Ok(EvalReport {
        config: ReportConfig::from(&cfg.bias),
        batch: cfg.batch.to_string(),
        instances: n,
        correct,
        accuracy: correct as f64 / n as f64,
        control_correct,
        control_accuracy: control_correct.map(|c| c as f64 / n as f64),
        errors,
        verdicts,
        entity_stats: stats,
        timing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::suite::scripted_suite;
    use crate::knowledge::RuleExtractor;

    fn setup() -> (Vec<EvalInstance>, crate::decode::MockLM, KnowledgeCache) {
        let suite = scripted_suite();
        let lm = suite.backend().unwrap();
        let build = prepare_cache(&suite.instances, &lm, &RuleExtractor::default(), None).unwrap();
        assert!(build.failures.is_empty(), "{:?}", build.failures);
        (suite.instances, lm, KnowledgeCache::from_records(build.records))
    }

    #[test]
    fn suite_accuracy_biased_and_control() {
        let (instances, lm, cache) = setup();
        let report = evaluate(&instances, &lm, &cache, &EvalConfig::default()).unwrap();
        let wrong: Vec<_> = report.verdicts.iter().filter(|v| !v.correct).collect();
        assert!(wrong.is_empty(), "{wrong:#?}");
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.control_accuracy, Some(0.0));
        assert_eq!(report.errors, 0);
        assert_eq!(report.verdicts[0].biased.answer, "Richard Dawkins");
        assert_eq!(report.verdicts[0].control.as_ref().unwrap().answer, "Stephen King");
    }

    #[test]
    fn empty_and_missing_cache() {
        let (instances, lm, cache) = setup();
        assert!(matches!(
            evaluate(&[], &lm, &cache, &EvalConfig::default()),
            Err(EvalError::NoInstances)
        ));
        let empty = KnowledgeCache::default();
        assert!(matches!(
            evaluate(&instances, &lm, &empty, &EvalConfig::default()),
            Err(EvalError::MissingCache(_))
        ));
    }

    #[test]
    fn single_instance_full_equals_batch_one() {
        let (instances, lm, cache) = setup();
        let one = &instances[..1];
        let a = evaluate(one, &lm, &cache, &EvalConfig::default()).unwrap();
        let cfg = EvalConfig {
            batch: BatchSize::Full,
            ..EvalConfig::default()
        };
        let b = evaluate(one, &lm, &cache, &cfg).unwrap();
        assert_eq!(a.verdicts, b.verdicts);
    }

    #[test]
    fn prompt_format() {
        let f = FactRecord::templated("m", "Misery", "{} was written by [X]", "Richard Dawkins");
        assert_eq!(
            eval_prompt(&[&f], "Who wrote Misery?"),
            "Imagine that Misery was written by Richard Dawkins.\nQuestion: Who wrote Misery?\nAnswer:"
        );
        assert_eq!(eval_prompt(&[], "Q?"), "Question: Q?\nAnswer:");
    }
}
