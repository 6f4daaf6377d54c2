//! Evaluation driver and report files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, StepError};

use super::config::TrainConfig;
use super::metrics::{distinct_n, recall_at_k, words};
use super::model::{Model, PreparedSample};
use super::train::CurvePoint;

pub const RECALL_KS: [usize; 3] = [1, 10, 50];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub recall_at_1: f64,
    pub recall_at_10: f64,
    pub recall_at_50: f64,
    pub distinct_2: f64,
    pub distinct_3: f64,
    pub distinct_4: f64,
    /// Turns with a non-empty gold set.
    pub eval_turns: usize,
}

/// Ranks and generates for every sample, then aggregates the metrics.
pub fn evaluate(model: &Model, samples: &[PreparedSample]) -> Result<EvalMetrics> {
    let cache = model.inference_cache()?;
    let k = RECALL_KS[2].min(model.graph.num_items());
    let mut ranked = Vec::with_capacity(samples.len());
    let mut gold = Vec::with_capacity(samples.len());
    let mut responses = Vec::with_capacity(samples.len());
    for s in samples {
        let out = model.infer(&cache, s, k)?;
        ranked.push(out.ranking);
        gold.push(s.gold_slots.clone());
        responses.push(words(&out.response));
    }
    let generated = !model.config.eval.skip_generation;
    let distinct = |n| if generated { distinct_n(&responses, n) } else { Ok(0.0) };
    Ok(EvalMetrics {
        recall_at_1: recall_at_k(&ranked, &gold, 1)?,
        recall_at_10: recall_at_k(&ranked, &gold, 10)?,
        recall_at_50: recall_at_k(&ranked, &gold, 50)?,
        distinct_2: distinct(2)?,
        distinct_3: distinct(3)?,
        distinct_4: distinct(4)?,
        eval_turns: gold.iter().filter(|g| !g.is_empty()).count(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub split: String,
    #[serde(flatten)]
    pub metrics: EvalMetrics,
    pub encoder_hash: String,
    pub decoder_hash: String,
    pub curves: Vec<CurvePoint>,
    pub config: TrainConfig,
}

/// Sidecar paths next to a report: `<stem>.curves.csv`, `<stem>.timing.json`.
pub fn sidecar_paths(report: &Path) -> (PathBuf, PathBuf) {
    let stem = report
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "report".into());
    let dir = report.parent().unwrap_or(Path::new(""));
    (
        dir.join(format!("{stem}.curves.csv")),
        dir.join(format!("{stem}.timing.json")),
    )
}

pub fn curves_csv(curves: &[CurvePoint]) -> String {
    let mut out = String::from("epoch,component,value\n");
    for p in curves {
        out.push_str(&format!("{},{},{}\n", p.epoch, p.component, p.value));
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| StepError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| StepError::io(path, e))
}

/// Writes the JSON report and its curves CSV.
pub fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    write(path, &json)?;
    write(&sidecar_paths(path).0, &curves_csv(&report.curves))
}

/// Wall-clock lives outside the report so reports stay reproducible.
pub fn write_timing(path: &Path, seconds: f64) -> Result<()> {
    let json = serde_json::json!({ "wall_clock_seconds": seconds });
    write(&sidecar_paths(path).1, &format!("{json}\n"))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write(path, text)
}
