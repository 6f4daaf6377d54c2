//! `step`: synthetic data generation, training, evaluation, ablations,
//! sweeps, gradient checks and an offline chat loop.

mod chat;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::info;
use step_core::dialogue::{generate_kg, generate_synthetic_corpus, split_corpus, SynthConfig, SynthKgConfig};
use step_core::kg::save_kg;
use step_core::pipeline::{
    ablation_csv, hyperparam_sweep, load_checkpoint, read_manifest, report_for, run_ablation_suite, run_grad_check_suite,
    save_checkpoint, sweep_csv, train, write_report, write_text, write_timing, Dataset, Model, SweepAxis, TrainConfig,
    TrainState, ITEMS_FILE, KG_FILE,
};
use step_core::{Result, StepError};

use config::ConfigArgs;

#[derive(Parser, Debug)]
#[command(name = "step", version, about = "Knowledge-graph fused conversational recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic graph and dialogue corpus.
    GenData {
        #[arg(long, default_value_t = 200)]
        entities: usize,
        #[arg(long, default_value_t = 4)]
        relations: usize,
        #[arg(long, default_value_t = 64)]
        items: usize,
        #[arg(long, default_value_t = 500)]
        dialogues: usize,
        /// Probability that a gold item is tied to a mentioned entity.
        #[arg(long, default_value_t = 0.9)]
        p_signal: f64,
        #[arg(long, default_value_t = 0.1)]
        p_second_gold: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train and write a checkpoint plus a metrics report.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Stop after this many epochs; resume later with --resume.
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Continue from a checkpoint, using its stored config.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        /// Checkpoint name, without the `.manifest.json` suffix.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every ablation variant plus the full model; write a CSV.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "runs/ablation.csv")]
        out: PathBuf,
    },
    /// Sweep prefix or query length; write a CSV.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// prefix_length or query_length.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values; defaults depend on the axis.
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
        #[arg(long, default_value = "runs/sweep.csv")]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable component.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Offline chat loop over a trained checkpoint.
    Chat {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn exit_code(err: &StepError) -> u8 {
    match err {
        StepError::Config(_) | StepError::InvalidArgument(_) => 2,
        StepError::Numerical(_) => 4,
        StepError::Shape { .. } => 1,
        _ => 3,
    }
}

fn echo<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn gen_data(cfg: &SynthConfig, out: &Path, force: bool) -> Result<()> {
    if cfg.kg.entities < 20 {
        return Err(StepError::Config(format!("--entities must be at least 20, got {}", cfg.kg.entities)));
    }
    let occupied = out
        .read_dir()
        .map(|mut d| d.next().is_some())
        .unwrap_or(false);
    if occupied && !force {
        return Err(StepError::Config(format!(
            "{} is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| StepError::io(out, e))?;
    let graph = generate_kg(&cfg.kg)?;
    let samples = generate_synthetic_corpus(&graph, cfg.dialogues, cfg.p_signal, cfg.p_second_gold, cfg.kg.seed)?;
    let corpus = split_corpus(samples, cfg.kg.seed);
    save_kg(&graph, &out.join(KG_FILE), &out.join(ITEMS_FILE))?;
    corpus.save_dir(out)?;

    let utterances: usize = corpus.all().map(|s| s.turns.len()).sum();
    println!("conversations  {}", corpus.len());
    println!("utterances     {utterances}");
    println!("entities       {}", graph.num_entities());
    println!("items          {}", graph.num_items());
    println!("relations      {}", graph.num_relations());
    println!("triples        {}", graph.triples().len());
    println!(
        "split          train {} / valid {} / test {}",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len()
    );
    Ok(())
}

fn load_data(cfg: &TrainConfig) -> Result<Dataset> {
    info!("loading data from {}", cfg.data.dir.display());
    Dataset::load(&cfg.data.dir)
}

fn cmd_train(config: &ConfigArgs, out: &Path, max_epochs: Option<usize>, resume: Option<&Path>) -> Result<()> {
    let start = Instant::now();
    let (mut model, mut state, data) = match resume {
        Some(ckpt) => {
            let mut cfg = read_manifest(ckpt)?.config;
            if let Some(dir) = &config.data {
                cfg.data.dir = dir.clone();
            }
            echo(&cfg)?;
            let data = load_data(&cfg)?;
            let (model, state) = load_checkpoint(ckpt, &data, Some(cfg))?;
            (model, state, data)
        }
        None => {
            let cfg = config.resolve()?;
            echo(&cfg)?;
            let data = load_data(&cfg)?;
            let model = Model::new(cfg, data.graph.clone(), data.vocab.clone())?;
            let state = TrainState::new(&model);
            (model, state, data)
        }
    };
    let train_data = model.prepare_all(&data.corpus.train)?;
    train(&mut model, &mut state, &train_data, max_epochs)?;
    let (manifest, blob) = save_checkpoint(&out.join("model"), &model, &state)?;
    let report = report_for(&model, &state, &data)?;
    let report_path = out.join("report.json");
    write_report(&report_path, &report)?;
    write_timing(&report_path, start.elapsed().as_secs_f64())?;
    echo(&report.metrics)?;
    println!("checkpoint {} + {}", manifest.display(), blob.display());
    println!("report {}", report_path.display());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data_dir: &Path, split: Option<String>, out: Option<&Path>) -> Result<()> {
    let mut cfg = read_manifest(checkpoint)?.config;
    cfg.data.dir = data_dir.to_path_buf();
    if let Some(split) = split {
        cfg.eval.split = split;
    }
    cfg.validate()?;
    echo(&cfg)?;
    let data = load_data(&cfg)?;
    let (model, state) = load_checkpoint(checkpoint, &data, Some(cfg))?;
    let report = report_for(&model, &state, &data)?;
    echo(&report.metrics)?;
    if let Some(path) = out {
        write_report(path, &report)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            entities,
            relations,
            items,
            dialogues,
            p_signal,
            p_second_gold,
            seed,
            out,
            force,
        } => {
            let cfg = SynthConfig {
                kg: SynthKgConfig {
                    entities,
                    relations,
                    items,
                    seed,
                },
                dialogues,
                p_signal,
                p_second_gold,
            };
            echo(&cfg)?;
            gen_data(&cfg, &out, force)
        }
        Command::Train {
            config,
            out,
            max_epochs,
            resume,
        } => cmd_train(&config, &out, max_epochs, resume.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => cmd_eval(&checkpoint, &data, split, out.as_deref()),
        Command::Ablate { config, out } => {
            let cfg = config.resolve()?;
            echo(&cfg)?;
            let data = load_data(&cfg)?;
            let csv = ablation_csv(&run_ablation_suite(&cfg, &data)?);
            write_text(&out, &csv)?;
            print!("{csv}");
            Ok(())
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => {
            let cfg = config.resolve()?;
            echo(&cfg)?;
            let values = if values.is_empty() { axis.default_values() } else { values };
            let data = load_data(&cfg)?;
            let csv = sweep_csv(axis, &hyperparam_sweep(&cfg, &data, axis, &values)?);
            write_text(&out, &csv)?;
            print!("{csv}");
            Ok(())
        }
        Command::GradCheck { seed } => {
            let mut failed = Vec::new();
            for entry in run_grad_check_suite(seed)? {
                let r = &entry.report;
                let status = if r.passed() { "ok" } else { "FAILED" };
                println!("{:<28} max rel err {:.3e}  {status}", entry.name, r.max_rel_err);
                if !r.passed() {
                    failed.push(entry.name);
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(StepError::Numerical(format!("gradient check failed for {failed:?}")))
            }
        }
        Command::Chat { checkpoint, data } => chat::run(&checkpoint, &data),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
