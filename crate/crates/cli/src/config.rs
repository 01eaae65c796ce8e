//! Merges command-line flags, the environment and the optional TOML file.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use serde::Deserialize;
use tokbias::biaser::{BiasConfig, SelectMode};
use tokbias::decode::{ModelBackend, MockLM, MockScript, RemoteBackend, RenormalizePolicy, SyntheticLM};

use crate::args::{BackendKind, Common, Mode};
use crate::UsageError;

const DEFAULT_TIMEOUT_SECS: u64 = 30;
const DEFAULT_VOCAB: usize = 32_000;

/// Keys accepted in the --config file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub alpha: Option<f64>,
    pub k: Option<usize>,
    pub ngram: Option<usize>,
    pub lambda_new: Option<f64>,
    pub lambda_para: Option<f64>,
    pub backend: Option<BackendKind>,
    pub endpoint: Option<String>,
    pub mock_script: Option<PathBuf>,
    pub top_n: Option<usize>,
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub renormalize: Option<bool>,
    pub timeout_secs: Option<u64>,
    pub vocab: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("config file {} not readable", path.display()))?;
        toml::from_str(&text)
            .map_err(|e| UsageError(format!("config file {}: {e}", path.display())).into())
    }
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub bias: BiasConfig,
    pub backend: BackendKind,
    pub endpoint: Option<String>,
    pub mock_script: Option<PathBuf>,
    pub top_n: Option<usize>,
    pub mode: Mode,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub renormalize: bool,
    pub timeout: Duration,
    pub vocab: usize,
}

impl Settings {
    pub fn resolve(flags: &Common) -> anyhow::Result<Self> {
        let file = match &flags.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let mut bias = BiasConfig::default();
        if let Some(v) = flags.alpha.or(file.alpha) {
            bias.filter.alpha = v;
        }
        if let Some(v) = flags.k.or(file.k) {
            bias.filter.k = v;
        }
        if let Some(v) = flags.ngram.or(file.ngram) {
            bias.n = v;
        }
        if let Some(v) = flags.lambda_new.or(file.lambda_new) {
            bias.lambda_new = v;
        }
        if let Some(v) = flags.lambda_para.or(file.lambda_para) {
            bias.lambda_para = v;
        }
        bias.validate().map_err(|e| UsageError(e.to_string()))?;
        let jobs = flags.jobs.or(file.jobs);
        if jobs == Some(0) {
            return Err(UsageError("--jobs must be at least 1".into()).into());
        }
        Ok(Self {
            bias,
            backend: flags.backend.or(file.backend).unwrap_or(BackendKind::Mock),
            endpoint: flags.endpoint.clone().or(file.endpoint),
            mock_script: flags.mock_script.clone().or(file.mock_script),
            top_n: flags.top_n.or(file.top_n),
            mode: flags.mode.or(file.mode).unwrap_or(Mode::Greedy),
            seed: flags.seed.or(file.seed),
            jobs,
            renormalize: flags.renormalize || file.renormalize.unwrap_or(false),
            timeout: Duration::from_secs(flags.timeout_secs.or(file.timeout_secs).unwrap_or(DEFAULT_TIMEOUT_SECS)),
            vocab: flags.vocab.or(file.vocab).unwrap_or(DEFAULT_VOCAB),
        })
    }

    /// Selection mode. Sampling without a seed is allowed only when
    /// `allow_unseeded`; a fresh seed is drawn and logged.
    pub fn select_mode(&self, allow_unseeded: bool) -> anyhow::Result<SelectMode> {
        match (self.mode, self.seed) {
            (Mode::Greedy, _) => Ok(SelectMode::Greedy),
            (Mode::Sample, Some(seed)) => Ok(SelectMode::Sample { seed }),
            (Mode::Sample, None) if allow_unseeded => {
                let seed = rand::random();
                log::warn!("sampling with random seed {seed}");
                Ok(SelectMode::Sample { seed })
            }
            (Mode::Sample, None) => {
                Err(UsageError("sampling mode needs --seed for reproducible evaluation".into()).into())
            }
        }
    }

    /// Builds the backend. `topic_words` seed the synthetic vocabulary.
    pub fn backend(&self, topic_words: &[&str]) -> anyhow::Result<Box<dyn ModelBackend>> {
        match self.backend {
            BackendKind::Mock => {
                let path = self
                    .mock_script
                    .as_ref()
                    .ok_or_else(|| UsageError("--backend mock needs --mock-script".into()))?;
                let script = MockScript::load(path)?;
                Ok(Box::new(MockLM::new(&script)?))
            }
            BackendKind::Remote => {
                let endpoint = self.endpoint.as_ref().ok_or_else(|| {
                    UsageError(format!(
                        "--backend remote needs --endpoint or {}",
                        crate::args::ENDPOINT_ENV
                    ))
                })?;
                let policy = if self.renormalize {
                    RenormalizePolicy::Local
                } else {
                    RenormalizePolicy::Refuse
                };
                Ok(Box::new(RemoteBackend::new(endpoint.clone(), self.timeout)?.with_policy(policy)))
            }
            BackendKind::Synthetic => {
                if self.vocab == 0 {
                    return Err(UsageError("--vocab must be positive".into()).into());
                }
                Ok(Box::new(SyntheticLM::new(self.vocab, self.seed.unwrap_or(0), topic_words)))
            }
        }
    }
}
