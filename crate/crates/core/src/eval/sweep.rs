//! One-axis ablation sweeps over the bias hyper-parameters.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use super::dataset::EvalInstance;
use super::evaluate::{evaluate, EvalConfig, EvalError};
use crate::biaser::BiasConfig;
use crate::decode::ModelBackend;
use crate::knowledge::KnowledgeCache;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    N,
    Alpha,
    K,
    LambdaNew,
    LambdaPara,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] = [
        SweepAxis::N,
        SweepAxis::Alpha,
        SweepAxis::K,
        SweepAxis::LambdaNew,
        SweepAxis::LambdaPara,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::N => "n",
            SweepAxis::Alpha => "alpha",
            SweepAxis::K => "k",
            SweepAxis::LambdaNew => "lambda_new",
            SweepAxis::LambdaPara => "lambda_para",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &BiasConfig, value: f64) -> Result<BiasConfig, SweepError> {
        let bad = || SweepError::BadValue { axis: self, value };
        let count = || {
            if value.fract() == 0.0 && value >= 1.0 && value <= u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(bad())
            }
        };
        let mut cfg = *base;
        match self {
            SweepAxis::N => cfg.n = count()?,
            SweepAxis::K => cfg.filter.k = count()?,
            SweepAxis::Alpha => cfg.filter.alpha = value,
            SweepAxis::LambdaNew => cfg.lambda_new = value,
            SweepAxis::LambdaPara => cfg.lambda_para = value,
        }
        cfg.validate().map_err(|_| bad())?;
        Ok(cfg)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.replace('-', "_");
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.name() == key)
            .ok_or_else(|| format!("unknown axis {s:?} (expected n, alpha, k, lambda_new or lambda_para)"))
    }
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("empty value list")]
    NoValues,
    #[error("value {value} is not valid for axis {axis}")]
    BadValue { axis: SweepAxis, value: f64 },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub instances: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub control_accuracy: Option<f64>,
    /// Instances where a head token matched a parametric entity.
    pub para_match_instances: usize,
    pub para_match_correct: usize,
    pub errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    /// Per-row instance verdicts `(id, correct, para_match_in_head)`.
    #[serde(skip)]
    pub verdicts: Vec<Vec<(String, bool, bool)>>,
}

impl SweepTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes") + "\n"
    }

    pub fn to_csv(&self) -> Result<String, SweepError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            self.axis.name(),
            "instances",
            "correct",
            "accuracy",
            "control_accuracy",
            "para_match_instances",
            "para_match_correct",
            "errors",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.value.to_string(),
                r.instances.to_string(),
                r.correct.to_string(),
                format!("{:.4}", r.accuracy),
                r.control_accuracy.map(|a| format!("{a:.4}")).unwrap_or_default(),
                r.para_match_instances.to_string(),
                r.para_match_correct.to_string(),
                r.errors.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| SweepError::Csv(e.into_error().into()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn summary(&self) -> String {
        let mut out = format!("{:<12}{:>10}{:>10}{:>12}\n", self.axis.name(), "accuracy", "correct", "para-match");
        for r in &self.rows {
            out += &format!(
                "{:<12}{:>10.4}{:>10}{:>8}/{:<3}\n",
                r.value, r.accuracy, r.correct, r.para_match_correct, r.para_match_instances
            );
        }
        out
    }
}

/// Evaluates once per value, other settings fixed at `base`.
pub fn ablation_sweep<B: ModelBackend + ?Sized>(
    axis: SweepAxis,
    values: &[f64],
    instances: &[EvalInstance],
    backend: &B,
    cache: &KnowledgeCache,
    base: &EvalConfig,
) -> Result<SweepTable, SweepError> {
    if values.is_empty() {
        return Err(SweepError::NoValues);
    }
    let configs = values
        .iter()
        .map(|v| axis.apply(&base.bias, *v))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::with_capacity(values.len());
    let mut verdicts = Vec::with_capacity(values.len());
    for (value, bias) in values.iter().zip(configs) {
        let cfg = EvalConfig {
            bias,
            measure_timing: false,
            ..base.clone()
        };
        let report = evaluate(instances, backend, cache, &cfg)?;
        let para: Vec<_> = report.verdicts.iter().filter(|v| v.para_match_in_head).collect();
        rows.push(SweepRow {
            value: *value,
            instances: report.instances,
            correct: report.correct,
            accuracy: report.accuracy,
            control_accuracy: report.control_accuracy,
            para_match_instances: para.len(),
            para_match_correct: para.iter().filter(|v| v.correct).count(),
            errors: report.errors,
        });
        verdicts.push(
            report
                .verdicts
                .iter()
                .map(|v| (v.id.clone(), v.correct, v.para_match_in_head))
                .collect(),
        );
    }
    Ok(SweepTable {
        axis,
        rows,
        verdicts,
    })
}
