use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context};
use log::warn;
use tokbias::decode::{decode, DecodeOptions, ModelBackend};
use tokbias::eval::{
    ablation_sweep, evaluate, load_dataset, measure_latency, prepare_cache, EvalConfig,
    EvalInstance, LatencyOptions, MIN_LATENCY_STEPS,
};
use tokbias::knowledge::{
    build_cache, load_cache, save_cache, BatchSize, EditMemory, EntitySet, KnowledgeCache,
    RuleExtractor,
};

use crate::args::{BenchArgs, CacheBuildArgs, DatasetArgs, DecodeArgs, EvalArgs, SweepArgs};
use crate::config::Settings;
use crate::UsageError;

/// Words used as entities by `bench` when no cache is given (8 + 8).
const BENCH_NEW: [&str; 8] = ["richard", "dawkins", "carl", "sagan", "isaac", "asimov", "mary", "shelley"];
const BENCH_PARA: [&str; 8] = ["stephen", "king", "jane", "austen", "toni", "morrison", "james", "joyce"];

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        bail!("{what} file {} not found", path.display());
    }
    Ok(())
}

fn load_existing_cache(path: Option<&Path>) -> anyhow::Result<Option<KnowledgeCache>> {
    match path {
        Some(p) if p.exists() => {
            let records = load_cache(p).with_context(|| format!("loading cache {}", p.display()))?;
            Ok(Some(KnowledgeCache::from_records(records)))
        }
        _ => Ok(None),
    }
}

fn write_report(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn cache_build(settings: &Settings, args: &CacheBuildArgs) -> anyhow::Result<bool> {
    require_file(&args.memory, "memory")?;
    let memory = EditMemory::load(&args.memory, BatchSize::Full)?;
    let previous = load_existing_cache(Some(&args.cache))?;
    let backend = settings.backend(&[])?;
    let build = build_cache(&memory, &backend, &RuleExtractor::default(), previous.as_ref());
    save_cache(&args.cache, &build.records)?;
    println!(
        "cache: {} records written to {} ({} failed, {} flagged)",
        build.records.len(),
        args.cache.display(),
        build.failures.len(),
        build.flagged.len()
    );
    for f in &build.failures {
        eprintln!("fact {}: {}", f.fact_id, f.reason);
    }
    Ok(build.failures.is_empty())
}

pub fn decode_cmd(settings: &Settings, args: &DecodeArgs) -> anyhow::Result<bool> {
    let entities = match &args.cache {
        Some(p) => {
            require_file(p, "cache")?;
            KnowledgeCache::from_records(load_cache(p)?).all_entities()
        }
        None => EntitySet::default(),
    };
    let words: Vec<&str> = entities.new_words().into_iter().chain(entities.para_words()).collect();
    let backend = settings.backend(&words)?;
    let cfg = if args.no_bias {
        settings.bias.control()
    } else {
        settings.bias
    };
    let opts = DecodeOptions {
        mode: settings.select_mode(true)?,
        max_tokens: args.max_tokens,
        top_n: settings.top_n,
        stop_at_newline: args.stop_at_newline,
        ..DecodeOptions::default()
    };
    let g = decode(&backend, &args.prompt, &entities, &cfg, &opts)?;
    if let Some(path) = &args.transcript {
        let mut out: Box<dyn Write> = if path.as_os_str() == "-" {
            Box::new(std::io::stdout().lock())
        } else {
            Box::new(std::io::BufWriter::new(std::fs::File::create(path)?))
        };
        for step in g.transcript.steps() {
            serde_json::to_writer(&mut out, step)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
    }
    println!("{}", g.text);
    Ok(true)
}

type Prepared = (Vec<EvalInstance>, Box<dyn ModelBackend>, KnowledgeCache, EvalConfig);

/// Loads the dataset and a cache covering its edits. Instances whose edits
/// could not be cached are dropped with a warning.
fn prepare(settings: &Settings, data: &DatasetArgs) -> anyhow::Result<Prepared> {
    let mode = settings.select_mode(false)?;
    require_file(&data.dataset, "dataset")?;
    let loaded = load_dataset(&data.dataset, data.format)?;
    for d in &loaded.diagnostics {
        eprintln!("{}:{}: {}", data.dataset.display(), d.line, d.message);
    }
    let backend = settings.backend(&[])?;
    let previous = load_existing_cache(data.cache.as_deref())?;
    let build = prepare_cache(&loaded.instances, &backend, &RuleExtractor::default(), previous.as_ref())?;
    if let Some(p) = &data.cache {
        save_cache(p, &build.records)?;
    }
    let failed: HashSet<&str> = build.failures.iter().map(|f| f.fact_id.as_str()).collect();
    for f in &build.failures {
        warn!("fact {}: {}", f.fact_id, f.reason);
    }
    let instances: Vec<EvalInstance> = loaded
        .instances
        .iter()
        .filter(|i| i.edits.iter().all(|e| !failed.contains(e.id.as_str())))
        .cloned()
        .collect();
    if instances.len() < loaded.instances.len() {
        warn!(
            "{} instances skipped: cache induction failed for one of their edits",
            loaded.instances.len() - instances.len()
        );
    }
    if instances.is_empty() {
        bail!("no instance has a complete knowledge cache");
    }
    let mut cfg = EvalConfig {
        bias: settings.bias,
        batch: data.batch,
        retrieve_limit: data.retrieve,
        ..EvalConfig::default()
    };
    cfg.decode.mode = mode;
    cfg.decode.top_n = settings.top_n;
    cfg.decode.max_tokens = data.max_tokens;
    Ok((instances, backend, KnowledgeCache::from_records(build.records), cfg))
}

pub fn eval_cmd(settings: &Settings, args: &EvalArgs) -> anyhow::Result<bool> {
    let (instances, backend, cache, mut cfg) = prepare(settings, &args.data)?;
    cfg.measure_timing = args.timing;
    let report = evaluate(&instances, &backend, &cache, &cfg)?;
    if let Some(p) = &args.report {
        write_report(p, &report.to_json())?;
    }
    print!("{}", report.summary());
    Ok(true)
}

pub fn bench_cmd(settings: &Settings, args: &BenchArgs) -> anyhow::Result<bool> {
    if args.steps < MIN_LATENCY_STEPS {
        return Err(UsageError(format!("--steps must be at least {MIN_LATENCY_STEPS}")).into());
    }
    let entities = match &args.cache {
        Some(p) => {
            require_file(p, "cache")?;
            KnowledgeCache::from_records(load_cache(p)?).all_entities()
        }
        None => EntitySet::from_words(BENCH_NEW, BENCH_PARA)?,
    };
    let words: Vec<&str> = entities.new_words().into_iter().chain(entities.para_words()).collect();
    let backend = settings.backend(&words)?;
    let opts = LatencyOptions {
        steps: args.steps,
        rounds: args.rounds,
        top_n: settings.top_n,
    };
    let report = measure_latency(&backend, &args.prompt, &entities, &settings.bias, &opts)?;
    if let Some(p) = &args.report {
        write_report(p, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    println!(
        "steps {}  rounds {}  entities {}",
        report.steps, report.rounds, report.entity_count
    );
    println!(
        "biased  {:.4} ms/token  {:.1} tokens/s",
        report.ms_per_token, report.tokens_per_s
    );
    println!("control {:.4} ms/token", report.control_ms_per_token);
    println!("overhead_ratio {:.3}", report.overhead_ratio);
    println!(
        "similarity evaluations per step: max {} (bound {})",
        report.max_sim_evaluations_per_step, report.sim_evaluation_bound
    );
    Ok(true)
}

pub fn sweep_cmd(settings: &Settings, args: &SweepArgs) -> anyhow::Result<bool> {
    let (instances, backend, cache, cfg) = prepare(settings, &args.data)?;
    let table = ablation_sweep(args.axis, &args.values, &instances, &backend, &cache, &cfg)?;
    if let Some(p) = &args.report {
        let text = if p.extension().is_some_and(|e| e == "csv") {
            table.to_csv()?
        } else {
            table.to_json()
        };
        write_report(p, &text)?;
    }
    print!("{}", table.summary());
    Ok(true)
}
