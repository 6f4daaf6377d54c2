//! Dialogue data model, corpus files, the frozen text encoder and the
//! synthetic corpus generator.

mod encoder;
mod synth;
mod text;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StepError};
use crate::kg::KnowledgeGraph;

pub use encoder::{sinusoidal_position, EncodedContext, FrozenTextEncoder};
pub use synth::{generate_kg, generate_synthetic_corpus, split_corpus, SynthConfig, SynthKgConfig};
pub use text::{
    detokenize, mask_items, tokenize, EntityLinker, Mention, Vocabulary, BOS, CLS, EOS, ITEM, ITEM_TOKEN, PAD, UNK,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Recommender,
}

impl Speaker {
    pub fn tag(self) -> &'static str {
        match self {
            Speaker::User => "user",
            Speaker::Recommender => "recommender",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    /// Item entity ids mentioned in this turn.
    #[serde(default)]
    pub items: Vec<usize>,
    /// Non-item entity ids linked in this turn.
    #[serde(default)]
    pub entities: Vec<usize>,
}

/// One dialogue cut at `target_turn`: the turns before it are the context,
/// the target turn is the recommender response and its `items` the gold set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueSample {
    pub id: String,
    pub turns: Vec<Turn>,
    pub target_turn: usize,
}

impl DialogueSample {
    pub fn context(&self) -> &[Turn] {
        &self.turns[..self.target_turn]
    }

    pub fn target(&self) -> &Turn {
        &self.turns[self.target_turn]
    }

    pub fn gold_items(&self) -> &[usize] {
        &self.target().items
    }

    /// Every entity and item mentioned in the context, first appearance order.
    pub fn linked_entities(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for turn in self.context() {
            for &e in turn.entities.iter().chain(&turn.items) {
                if !out.contains(&e) {
                    out.push(e);
                }
            }
        }
        out
    }

    /// Items mentioned in the context.
    pub fn context_items(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for turn in self.context() {
            for &e in &turn.items {
                if !out.contains(&e) {
                    out.push(e);
                }
            }
        }
        out
    }

    pub fn validate(&self, g: &KnowledgeGraph) -> Result<()> {
        let bad = |msg: String| Err(StepError::Validation(format!("sample {}: {msg}", self.id)));
        if self.target_turn >= self.turns.len() {
            return bad(format!("target_turn {} out of range", self.target_turn));
        }
        if self.target().speaker != Speaker::Recommender {
            return bad("target turn is not a recommender turn".into());
        }
        for turn in &self.turns {
            for &i in &turn.items {
                if !g.is_item(i) {
                    return bad(format!("item id {i} is not a KG item"));
                }
            }
            for &e in &turn.entities {
                if e >= g.num_entities() {
                    return bad(format!("entity id {e} is not in the KG"));
                }
            }
        }
        Ok(())
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<DialogueSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| StepError::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: DialogueSample = serde_json::from_str(line).map_err(|e| StepError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        out.push(sample);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, samples: &[DialogueSample]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| StepError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| StepError::io(path, e))?;
    }
    w.flush().map_err(|e| StepError::io(path, e))
}

/// The three corpus splits.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<DialogueSample>,
    pub valid: Vec<DialogueSample>,
    pub test: Vec<DialogueSample>,
}

impl Corpus {
    pub const SPLITS: [&'static str; 3] = ["train", "valid", "test"];

    pub fn split_path(dir: &Path, split: &str) -> std::path::PathBuf {
        dir.join(format!("corpus.{split}.jsonl"))
    }

    pub fn load_dir(dir: &Path) -> Result<Corpus> {
        Ok(Corpus {
            train: read_jsonl(&Self::split_path(dir, "train"))?,
            valid: read_jsonl(&Self::split_path(dir, "valid"))?,
            test: read_jsonl(&Self::split_path(dir, "test"))?,
        })
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        write_jsonl(&Self::split_path(dir, "train"), &self.train)?;
        write_jsonl(&Self::split_path(dir, "valid"), &self.valid)?;
        write_jsonl(&Self::split_path(dir, "test"), &self.test)
    }

    pub fn split(&self, name: &str) -> Result<&[DialogueSample]> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            other => Err(StepError::Config(format!("unknown split `{other}`"))),
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &DialogueSample> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, g: &KnowledgeGraph) -> Result<()> {
        self.all().try_for_each(|s| s.validate(g))
    }

    /// Vocabulary over every text in the corpus plus speaker tags.
    pub fn build_vocabulary(&self) -> Vocabulary {
        let texts: Vec<&str> = self
            .all()
            .flat_map(|s| s.turns.iter().map(|t| t.text.as_str()))
            .chain(["user :", "recommender :"])
            .collect();
        Vocabulary::build(texts)
    }
}
