//! Training orchestration, evaluation, checkpoints and experiment drivers.

mod checkpoint;
mod config;
mod experiments;
mod gradcheck;
mod metrics;
mod model;
mod params;
mod report;
mod train;

use std::path::Path;

use crate::dialogue::{generate_kg, generate_synthetic_corpus, split_corpus, Corpus, SynthConfig, Vocabulary};
use crate::error::Result;
use crate::kg::{load_kg_with_items, KnowledgeGraph};

pub use checkpoint::{checkpoint_paths, load_checkpoint, manifest_for, read_manifest, save_checkpoint, Manifest, TensorEntry};
pub use config::{DataConfig, EvalConfig, ModelConfig, ObjectiveConfig, OptimConfig, RecTemplate, TrainConfig};
pub use experiments::{
    ablation_csv, hyperparam_sweep, report_for, run_ablation_suite, sweep_csv, train_and_evaluate, AblationRow, RunResult,
    SweepAxis, SweepRow,
};
pub use gradcheck::{run_grad_check_suite, GradCheckEntry, GRAD_CHECK_STEP, GRAD_CHECK_TOLERANCE};
pub use metrics::{distinct_n, recall_at_k, words};
pub use model::{
    render_context, BatchForward, ComponentValues, Heads, Inference, InferenceCache, Model, PreparedSample, GROUP_FFORMER,
    GROUP_GRAPH, GROUP_PREFIX, QUERY_BANK,
};
pub use params::{adamw_step, clip_global_norm, collect_grads, AdamState, AdamWConfig, Bound, ParamStore};
pub use report::{
    curves_csv, evaluate, sidecar_paths, write_report, write_text, write_timing, EvalMetrics, MetricsReport, RECALL_KS,
};
pub use train::{train, CurvePoint, TrainState};

pub const KG_FILE: &str = "kg.tsv";
pub const ITEMS_FILE: &str = "items.txt";

/// Graph, corpus and vocabulary loaded from one data directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub graph: KnowledgeGraph,
    pub corpus: Corpus,
    pub vocab: Vocabulary,
}

impl Dataset {
    pub fn from_parts(graph: KnowledgeGraph, corpus: Corpus) -> Result<Dataset> {
        corpus.validate(&graph)?;
        let vocab = corpus.build_vocabulary();
        Ok(Dataset { graph, corpus, vocab })
    }

    /// Generates the graph and corpus in memory. The corpus and split use
    /// the same seed as the graph.
    pub fn synthetic(cfg: &SynthConfig) -> Result<Dataset> {
        let graph = generate_kg(&cfg.kg)?;
        let samples = generate_synthetic_corpus(&graph, cfg.dialogues, cfg.p_signal, cfg.p_second_gold, cfg.kg.seed)?;
        let corpus = split_corpus(samples, cfg.kg.seed);
        Dataset::from_parts(graph, corpus)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let (graph, _) = load_kg_with_items(&dir.join(KG_FILE), &dir.join(ITEMS_FILE))?;
        let corpus = Corpus::load_dir(dir)?;
        Dataset::from_parts(graph, corpus)
    }
}
