//! Offline chat loop: each user line is linked against entity names, the
//! items are ranked and a response is generated with `[ITEM]` filled in.

use std::io::{self, BufRead, Write};
use std::path::Path;

use step_core::dialogue::{Speaker, Turn};
use step_core::pipeline::{load_checkpoint, read_manifest, Dataset, Model};
use step_core::{Result, StepError};

const GREETING: &str = "Can I help you find a good movie?";
const QUIT: &str = ":quit";
const TOP_ITEMS: usize = 3;

pub fn run(checkpoint: &Path, data_dir: &Path) -> Result<()> {
    let mut cfg = read_manifest(checkpoint)?.config;
    cfg.data.dir = data_dir.to_path_buf();
    cfg.eval.skip_generation = false;
    let data = Dataset::load(data_dir)?;
    let (model, _) = load_checkpoint(checkpoint, &data, Some(cfg))?;
    let stdin = io::stdin();
    let stdout = io::stdout();
    session(&model, stdin.lock(), stdout.lock())
}

fn io_err(e: io::Error) -> StepError {
    StepError::io("<stdio>", e)
}

/// Runs the loop until `:quit` or end of input.
pub fn session(model: &Model, input: impl BufRead, mut out: impl Write) -> Result<()> {
    let cache = model.inference_cache()?;
    let mut history = vec![Turn {
        speaker: Speaker::Recommender,
        text: GREETING.into(),
        items: vec![],
        entities: vec![],
    }];
    writeln!(out, "system: {GREETING}").map_err(io_err)?;
    let mut lines = input.lines();
    loop {
        write!(out, "> ").map_err(io_err)?;
        out.flush().map_err(io_err)?;
        let line = match lines.next() {
            None => break,
            Some(Ok(l)) => l,
            Some(Err(_)) => {
                writeln!(out, "(could not read that line, please type it again)").map_err(io_err)?;
                continue;
            }
        };
        let text = line.trim();
        if text == QUIT {
            break;
        }
        if text.is_empty() {
            continue;
        }
        history.push(Model::user_turn(text));
        let sample = model.prepare_live(&history)?;
        let linked: Vec<String> = sample
            .entities
            .iter()
            .map(|&e| format!("{e}:{}", model.graph.entity_name(e)))
            .collect();
        writeln!(out, "linked: [{}]", linked.join(", ")).map_err(io_err)?;
        let result = model.infer(&cache, &sample, TOP_ITEMS)?;
        for (rank, &slot) in result.ranking.iter().enumerate() {
            let entity = model.graph.items()[slot];
            writeln!(
                out,
                "  {}. {} ({:.4})",
                rank + 1,
                model.graph.entity_name(entity),
                result.probs[slot]
            )
            .map_err(io_err)?;
        }
        writeln!(out, "system: {}", result.response).map_err(io_err)?;
        history.push(Turn {
            speaker: Speaker::Recommender,
            text: result.response,
            items: vec![],
            entities: vec![],
        });
    }
    Ok(())
}
