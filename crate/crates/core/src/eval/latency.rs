//! Per-token latency of biased decoding against the unbiased control on the
//! same backend and prompt.
//!
//! Each round decodes a fixed number of tokens once per arm, alternating
//! which arm goes first. The reported latency of an arm is its fastest
//! round; the overhead ratio is the median of per-round ratios.
//! Runs are single-threaded.

use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::biaser::BiasConfig;
use crate::decode::{decode, DecodeError, DecodeOptions, ModelBackend};
use crate::knowledge::EntitySet;

pub const MIN_LATENCY_STEPS: usize = 100;

#[derive(Debug, Error)]
pub enum LatencyError {
    #[error("timing needs at least {MIN_LATENCY_STEPS} steps, got {0}")]
    TooFewSteps(usize),
    #[error("at least one round is required")]
    ZeroRounds,
    #[error("workload stopped after {got} of {want} steps")]
    ShortRun { got: usize, want: usize },
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

#[derive(Debug, Clone)]
pub struct LatencyOptions {
    pub steps: usize,
    pub rounds: usize,
    pub top_n: Option<usize>,
}

impl Default for LatencyOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            rounds: 11,
            top_n: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub steps: usize,
    pub rounds: usize,
    pub entity_count: usize,
    pub ms_per_token: f64,
    pub tokens_per_s: f64,
    pub control_ms_per_token: f64,
    pub overhead_ratio: f64,
    /// Largest number of similarity computations in any biased step.
    pub max_sim_evaluations_per_step: usize,
    /// `k * |E|`.
    pub sim_evaluation_bound: usize,
}

/// Fastest round. Scheduler and paging noise only ever adds time, so the
/// minimum tracks the intrinsic cost better than the median.
fn fastest(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::INFINITY, f64::min)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        (xs[m - 1] + xs[m]) / 2.0
    }
}

struct Run {
    ms_per_token: f64,
    max_sim: usize,
}

fn timed_run<B: ModelBackend + ?Sized>(
    backend: &B,
    prompt: &str,
    entities: &EntitySet,
    cfg: &BiasConfig,
    opts: &DecodeOptions,
) -> Result<Run, LatencyError> {
    let start = Instant::now();
    let g = decode(backend, prompt, entities, cfg, opts)?;
    let elapsed = start.elapsed();
    let steps = g.transcript.total_steps();
    if steps != opts.max_tokens {
        return Err(LatencyError::ShortRun {
            got: steps,
            want: opts.max_tokens,
        });
    }
    Ok(Run {
        ms_per_token: elapsed.as_secs_f64() * 1e3 / steps as f64,
        max_sim: g.transcript.max_sim_evaluations(),
    })
}

/// Times arm `a` against arm `b`; the ratio is `a / b`.
pub fn measure_latency_pair<B: ModelBackend + ?Sized>(
    backend: &B,
    prompt: &str,
    entities: &EntitySet,
    a: &BiasConfig,
    b: &BiasConfig,
    opts: &LatencyOptions,
) -> Result<LatencyReport, LatencyError> {
    if opts.steps < MIN_LATENCY_STEPS {
        return Err(LatencyError::TooFewSteps(opts.steps));
    }
    if opts.rounds == 0 {
        return Err(LatencyError::ZeroRounds);
    }
    let decode_opts = DecodeOptions {
        max_tokens: opts.steps,
        top_n: opts.top_n,
        stop_pieces: Vec::new(),
        stop_at_newline: false,
        transcript_capacity: 1,
        ..DecodeOptions::default()
    };
    // warm-up, untimed
    timed_run(backend, prompt, entities, b, &decode_opts)?;
    timed_run(backend, prompt, entities, a, &decode_opts)?;

    let mut a_ms = Vec::with_capacity(opts.rounds);
    let mut b_ms = Vec::with_capacity(opts.rounds);
    let mut max_sim = 0;
    for round in 0..opts.rounds {
        let (ra, rb) = if round % 2 == 0 {
            let rb = timed_run(backend, prompt, entities, b, &decode_opts)?;
            (timed_run(backend, prompt, entities, a, &decode_opts)?, rb)
        } else {
            let ra = timed_run(backend, prompt, entities, a, &decode_opts)?;
            (ra, timed_run(backend, prompt, entities, b, &decode_opts)?)
        };
        max_sim = max_sim.max(ra.max_sim);
        a_ms.push(ra.ms_per_token);
        b_ms.push(rb.ms_per_token);
    }
    // Back-to-back runs share whatever slow phase the machine is in, so the
    // ratio is taken per round before aggregating.
    let ratios: Vec<f64> = a_ms.iter().zip(&b_ms).map(|(a, b)| if *b > 0.0 { a / b } else { 1.0 }).collect();
    let ms = fastest(&a_ms);
    let control_ms = fastest(&b_ms);
    Ok(LatencyReport {
        steps: opts.steps,
        rounds: opts.rounds,
        entity_count: entities.len(),
        ms_per_token: ms,
        tokens_per_s: if ms > 0.0 { 1e3 / ms } else { f64::INFINITY },
        control_ms_per_token: control_ms,
        overhead_ratio: median(ratios),
        max_sim_evaluations_per_step: max_sim,
        sim_evaluation_bound: a.filter.k * entities.len(),
    })
}

/// Biased `cfg` against its control.
pub fn measure_latency<B: ModelBackend + ?Sized>(
    backend: &B,
    prompt: &str,
    entities: &EntitySet,
    cfg: &BiasConfig,
    opts: &LatencyOptions,
) -> Result<LatencyReport, LatencyError> {
    measure_latency_pair(backend, prompt, entities, cfg, &cfg.control(), opts)
}
