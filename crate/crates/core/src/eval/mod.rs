//! Dataset ingestion, accuracy evaluation, timing, entity statistics and
//! ablation sweeps.

mod dataset;
mod evaluate;
mod judge;
mod latency;
mod stats;
mod suite;
mod sweep;

pub use dataset::{
    load_dataset, save_mquake_like, DatasetError, DatasetFormat, Diagnostic, EvalInstance,
    LoadedDataset,
};
pub use evaluate::{
    eval_prompt, evaluate, evaluate_with_judge, prepare_cache, shared_prefix_consistent,
    ArmVerdict, EvalConfig, EvalError, EvalReport, ReportConfig, Timing, Verdict,
    DEFAULT_ANSWER_TOKENS, DEFAULT_RETRIEVE_LIMIT,
};
pub use judge::{contains_words, judge, ContainmentJudge, Judge};
pub use latency::{
    measure_latency, measure_latency_pair, LatencyError, LatencyOptions, LatencyReport,
    MIN_LATENCY_STEPS,
};
pub use stats::{entity_prob_stats, ArmStats, EntityHistograms, EntityStats, Histogram, HistogramRow};
pub use suite::{scripted_suite, suite_kind, ScriptedSuite, SuiteFiles, SuiteKind};
pub use sweep::{ablation_sweep, SweepAxis, SweepError, SweepRow, SweepTable};
