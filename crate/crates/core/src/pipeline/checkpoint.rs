//! Checkpoints: a JSON manifest plus a blob of little-endian f32 arrays.
//!
//! The blob holds every parameter, then every first-moment tensor, then every
//! second-moment tensor, each in parameter order. Manifest entries give the
//! byte offset and element count of each array.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, StepError};
use crate::numerics::Tensor;

use super::config::TrainConfig;
use super::model::Model;
use super::train::{CurvePoint, TrainState};
use super::Dataset;

pub const FORMAT: &str = "step-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub byte_order: String,
    pub dtype: String,
    pub seed: u64,
    pub rec_epochs_done: usize,
    pub conv_epochs_done: usize,
    pub adam_step: u64,
    pub encoder_hash: String,
    pub decoder_hash: String,
    pub config: TrainConfig,
    pub curves: Vec<CurvePoint>,
    pub tensors: Vec<TensorEntry>,
}

/// `(manifest, blob)` paths for a checkpoint name such as `out/model`.
pub fn checkpoint_paths(name: &Path) -> (PathBuf, PathBuf) {
    let s = name.to_string_lossy();
    let base = s
        .strip_suffix(".manifest.json")
        .or_else(|| s.strip_suffix(".params.bin"))
        .unwrap_or(&s)
        .to_string();
    (
        PathBuf::from(format!("{base}.manifest.json")),
        PathBuf::from(format!("{base}.params.bin")),
    )
}

fn blob_and_entries(model: &Model, state: &TrainState) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    let groups: [(&str, &[Tensor]); 3] = [
        ("param", model.params.tensors()),
        ("adam_m", &state.adam.m),
        ("adam_v", &state.adam.v),
    ];
    for (prefix, tensors) in groups {
        for (name, t) in model.params.names().iter().zip(tensors) {
            entries.push(TensorEntry {
                name: format!("{prefix}/{name}"),
                shape: t.shape().to_vec(),
                offset: blob.len(),
                length: t.numel(),
            });
            blob.extend(t.to_le_f32_bytes());
        }
    }
    (blob, entries)
}

pub fn manifest_for(model: &Model, state: &TrainState) -> Manifest {
    let (_, tensors) = blob_and_entries(model, state);
    Manifest {
        format: FORMAT.into(),
        byte_order: "little-endian".into(),
        dtype: "f32".into(),
        seed: model.config.seed,
        rec_epochs_done: state.rec_epochs_done,
        conv_epochs_done: state.conv_epochs_done,
        adam_step: state.adam.step,
        encoder_hash: model.encoder_hash(),
        decoder_hash: model.decoder_hash(),
        config: model.config.clone(),
        curves: state.curves.clone(),
        tensors,
    }
}

pub fn save_checkpoint(name: &Path, model: &Model, state: &TrainState) -> Result<(PathBuf, PathBuf)> {
    let (manifest_path, blob_path) = checkpoint_paths(name);
    if let Some(dir) = manifest_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| StepError::io(dir, e))?;
    }
    let (blob, _) = blob_and_entries(model, state);
    let manifest = manifest_for(model, state);
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(&manifest_path, json).map_err(|e| StepError::io(&manifest_path, e))?;
    fs::write(&blob_path, blob).map_err(|e| StepError::io(&blob_path, e))?;
    Ok((manifest_path, blob_path))
}

pub fn read_manifest(name: &Path) -> Result<Manifest> {
    let (manifest_path, _) = checkpoint_paths(name);
    let text = fs::read_to_string(&manifest_path).map_err(|e| StepError::io(&manifest_path, e))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| StepError::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
    if m.format != FORMAT || m.byte_order != "little-endian" || m.dtype != "f32" {
        return Err(StepError::Checkpoint(format!(
            "{}: unsupported format {} / {} / {}",
            manifest_path.display(),
            m.format,
            m.byte_order,
            m.dtype
        )));
    }
    Ok(m)
}

fn read_tensor(blob: &[u8], entry: &TensorEntry, expected: &[usize]) -> Result<Tensor> {
    if entry.shape != expected {
        return Err(StepError::Checkpoint(format!(
            "{}: stored shape {:?} does not match model shape {:?}",
            entry.name, entry.shape, expected
        )));
    }
    let end = entry.offset + entry.length * 4;
    if entry.length != expected.iter().product::<usize>() || end > blob.len() {
        return Err(StepError::Checkpoint(format!("{}: truncated or inconsistent entry", entry.name)));
    }
    let data = blob[entry.offset..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Tensor::new(expected.to_vec(), data)
}

/// Rebuilds the model for the stored config on `data` and restores every
/// parameter and optimizer moment, validating shapes and frozen hashes.
pub fn load_checkpoint(name: &Path, data: &Dataset, config_override: Option<TrainConfig>) -> Result<(Model, TrainState)> {
    let manifest = read_manifest(name)?;
    let (_, blob_path) = checkpoint_paths(name);
    let blob = fs::read(&blob_path).map_err(|e| StepError::io(&blob_path, e))?;
    let config = config_override.unwrap_or_else(|| manifest.config.clone());
    let mut model = Model::new(config, data.graph.clone(), data.vocab.clone())?;
    if model.encoder_hash() != manifest.encoder_hash || model.decoder_hash() != manifest.decoder_hash {
        return Err(StepError::Checkpoint(
            "frozen text model hashes differ from the checkpoint (different seed or vocabulary?)".into(),
        ));
    }
    let n = model.params.len();
    if manifest.tensors.len() != 3 * n {
        return Err(StepError::Checkpoint(format!(
            "checkpoint has {} arrays, model needs {}",
            manifest.tensors.len(),
            3 * n
        )));
    }
    let mut state = TrainState::new(&model);
    let names: Vec<String> = model.params.names().to_vec();
    for (g, prefix) in ["param", "adam_m", "adam_v"].iter().enumerate() {
        for (i, name) in names.iter().enumerate() {
            let entry = &manifest.tensors[g * n + i];
            if entry.name != format!("{prefix}/{name}") {
                return Err(StepError::Checkpoint(format!(
                    "expected array `{prefix}/{name}`, found `{}`",
                    entry.name
                )));
            }
            let shape = model.params.tensors()[i].shape().to_vec();
            let t = read_tensor(&blob, entry, &shape)?;
            match g {
                0 => model.params.set(name, t)?,
                1 => state.adam.m[i] = t,
                _ => state.adam.v[i] = t,
            }
        }
    }
    state.adam.step = manifest.adam_step;
    state.rec_epochs_done = manifest.rec_epochs_done;
    state.conv_epochs_done = manifest.conv_epochs_done;
    state.curves = manifest.curves;
    Ok((model, state))
}
