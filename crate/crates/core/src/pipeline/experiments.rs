//! Train-then-evaluate runs, the ablation table and hyper-parameter sweeps.

use std::str::FromStr;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StepError};
use crate::objectives::AblationFlags;

use super::config::TrainConfig;
use super::model::Model;
use super::report::{evaluate, MetricsReport};
use super::train::{train, TrainState};
use super::Dataset;

pub struct RunResult {
    pub model: Model,
    pub state: TrainState,
    pub report: MetricsReport,
    pub seconds: f64,
}

/// Builds a report for `model` evaluated on the configured split.
pub fn report_for(model: &Model, state: &TrainState, data: &Dataset) -> Result<MetricsReport> {
    let split = data.corpus.split(&model.config.eval.split)?;
    let prepared = model.prepare_all(split)?;
    let metrics = evaluate(model, &prepared)?;
    Ok(MetricsReport {
        seed: model.config.seed,
        split: model.config.eval.split.clone(),
        metrics,
        encoder_hash: model.encoder_hash(),
        decoder_hash: model.decoder_hash(),
        curves: state.curves.clone(),
        config: model.config.clone(),
    })
}

pub fn train_and_evaluate(config: TrainConfig, data: &Dataset) -> Result<RunResult> {
    let start = Instant::now();
    let mut model = Model::new(config, data.graph.clone(), data.vocab.clone())?;
    let mut state = TrainState::new(&model);
    let train_data = model.prepare_all(&data.corpus.train)?;
    train(&mut model, &mut state, &train_data, None)?;
    let report = report_for(&model, &state, data)?;
    Ok(RunResult {
        model,
        state,
        report,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub recall_at_1: f64,
    pub recall_at_10: f64,
    pub recall_at_50: f64,
}

/// Trains every ablation variant plus the full model with the same seed and
/// data. Rows come out in table order, full model last.
pub fn run_ablation_suite(config: &TrainConfig, data: &Dataset) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, flags) in AblationFlags::VARIANTS {
        let mut cfg = config.clone();
        cfg.ablation = flags;
        info!("ablation run `{name}`");
        let run = train_and_evaluate(cfg, data)?;
        let m = &run.report.metrics;
        rows.push(AblationRow {
            model: name.to_string(),
            recall_at_1: m.recall_at_1,
            recall_at_10: m.recall_at_10,
            recall_at_50: m.recall_at_50,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("model,recall@1,recall@10,recall@50\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.model, r.recall_at_1, r.recall_at_10, r.recall_at_50));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Both prefix lengths set to the value.
    PrefixLength,
    /// Query bank size.
    QueryLength,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::PrefixLength => "prefix_length",
            SweepAxis::QueryLength => "query_length",
        }
    }

    pub fn default_values(self) -> Vec<usize> {
        match self {
            SweepAxis::PrefixLength => vec![4, 8, 16, 24],
            SweepAxis::QueryLength => vec![24, 32, 40, 48],
        }
    }

    pub fn apply(self, config: &TrainConfig, value: usize) -> TrainConfig {
        let mut c = config.clone();
        match self {
            SweepAxis::PrefixLength => {
                c.model.prefix_conv = value;
                c.model.prefix_rec = value;
            }
            SweepAxis::QueryLength => c.model.queries = value,
        }
        c
    }
}

impl FromStr for SweepAxis {
    type Err = StepError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefix_length" | "prefix-length" => Ok(SweepAxis::PrefixLength),
            "query_length" | "query-length" => Ok(SweepAxis::QueryLength),
            other => Err(StepError::Config(format!(
                "unknown sweep axis `{other}` (expected prefix_length or query_length)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub recall_at_1: f64,
    pub recall_at_50: f64,
}

pub fn hyperparam_sweep(config: &TrainConfig, data: &Dataset, axis: SweepAxis, values: &[usize]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(StepError::Config("sweep needs at least one value".into()));
    }
    let mut rows = Vec::new();
    for &v in values {
        info!("sweep {} = {v}", axis.name());
        let run = train_and_evaluate(axis.apply(config, v), data)?;
        rows.push(SweepRow {
            value: v,
            recall_at_1: run.report.metrics.recall_at_1,
            recall_at_50: run.report.metrics.recall_at_50,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let mut out = format!("{},recall@1,recall@50\n", axis.name());
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.value, r.recall_at_1, r.recall_at_50));
    }
    out
}
