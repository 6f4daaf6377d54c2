//! Run configuration. Every field has a default; JSON files and dotted-key
//! overrides are merged on top, and unknown keys are rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, StepError};
use crate::fformer::TextKeys;
use crate::numerics::Activation;
use crate::objectives::{AblationFlags, ContrastiveConfig, CurriculumSchedule};
use crate::prompt::SecondaryFusion;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    /// Query bank size K.
    pub queries: usize,
    /// Residual attention layers per F-Former stage.
    pub fformer_layers: usize,
    pub prefix_conv: usize,
    pub prefix_rec: usize,
    pub inverse_relations: bool,
    pub rgcn_activation: Activation,
    pub text_keys: TextKeys,
    /// Secondary fusion scale for the recommendation prompt.
    pub lambda: f64,
    pub secondary_fusion: SecondaryFusion,
    pub encoder_max_len: usize,
    pub decoder_max_len: usize,
    pub decoder_layers: usize,
    pub entity_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            queries: 32,
            fformer_layers: 2,
            prefix_conv: 16,
            prefix_rec: 8,
            inverse_relations: true,
            rgcn_activation: Activation::Relu,
            text_keys: TextKeys::Cls,
            lambda: 0.1,
            secondary_fusion: SecondaryFusion::MentionedMean,
            encoder_max_len: 256,
            decoder_max_len: 96,
            decoder_layers: 2,
            entity_init_std: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub temperature: f64,
    pub margin: f64,
    pub smoothing: f64,
    pub mask_label_collisions: bool,
    /// Weight of the alignment loss added to each head loss.
    pub alpha: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        let c = ContrastiveConfig::default();
        ObjectiveConfig {
            temperature: c.temperature,
            margin: c.margin,
            smoothing: c.smoothing,
            mask_label_collisions: c.mask_label_collisions,
            alpha: 0.5,
        }
    }
}

impl ObjectiveConfig {
    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: self.temperature,
            margin: self.margin,
            smoothing: self.smoothing,
            mask_label_collisions: self.mask_label_collisions,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub batch_size_rec: usize,
    pub batch_size_conv: usize,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Train both heads together for `En` epochs instead of two phases.
    pub joint: bool,
    /// Keep the query bank fixed during the conversation phase.
    pub freeze_queries_in_finetune: bool,
    /// Conversation-phase epochs; `None` means `En`.
    pub conv_epochs: Option<usize>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            batch_size_rec: 54,
            batch_size_conv: 24,
            lr_pretrain: 5e-4,
            lr_finetune: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            joint: false,
            freeze_queries_in_finetune: false,
            conv_epochs: None,
        }
    }
}

/// Template fed to the recommendation prompt at evaluation time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecTemplate {
    /// The response generated by the conversation head.
    #[default]
    Generated,
    /// The gold response with item names masked.
    Gold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: String,
    pub max_new_tokens: usize,
    pub rec_template: RecTemplate,
    /// Skip response generation (distinct-n is then reported as 0).
    pub skip_generation: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: "test".into(),
            max_new_tokens: 24,
            rec_template: RecTemplate::Generated,
            skip_generation: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { dir: PathBuf::from("data") }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub curriculum: CurriculumSchedule,
    pub ablation: AblationFlags,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StepError::Config(m));
        let m = &self.model;
        if m.dim == 0 || m.queries == 0 || m.prefix_conv == 0 || m.prefix_rec == 0 {
            return bad("model.dim, queries and prefix lengths must be positive".into());
        }
        if m.encoder_max_len < 2 {
            return bad("model.encoder_max_len must be at least 2".into());
        }
        if m.decoder_max_len < m.prefix_conv.max(m.prefix_rec) + 4 {
            return bad("model.decoder_max_len is too short for the prefixes".into());
        }
        if !(m.lambda.is_finite()) || !(m.entity_init_std >= 0.0) {
            return bad("model.lambda must be finite and entity_init_std >= 0".into());
        }
        self.objective.contrastive().validate()?;
        if !(self.objective.alpha >= 0.0) {
            return bad(format!("objective.alpha must be >= 0, got {}", self.objective.alpha));
        }
        self.curriculum.validate()?;
        let o = &self.optim;
        if !(o.lr_pretrain > 0.0 && o.lr_finetune > 0.0) {
            return bad("learning rates must be > 0".into());
        }
        if o.batch_size_rec == 0 || o.batch_size_conv == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("optim betas must lie in [0, 1) and eps > 0".into());
        }
        if !(o.weight_decay >= 0.0) || !(o.grad_clip > 0.0) {
            return bad("optim.weight_decay must be >= 0 and grad_clip > 0".into());
        }
        if !["train", "valid", "test"].contains(&self.eval.split.as_str()) {
            return bad(format!("eval.split must be train, valid or test, got {}", self.eval.split));
        }
        Ok(())
    }

    pub fn conv_epochs(&self) -> usize {
        self.optim.conv_epochs.unwrap_or(self.curriculum.en)
    }

    /// Merges a JSON object over this config. Unknown keys are rejected.
    pub fn merge_json(&self, overlay: &Value) -> Result<TrainConfig> {
        let mut base = serde_json::to_value(self)?;
        merge_values(&mut base, overlay);
        serde_json::from_value(base).map_err(|e| StepError::Config(e.to_string()))
    }

    /// Applies `dotted.key = value`. The value is parsed as JSON when it
    /// parses, otherwise taken as a string.
    pub fn set_dotted(&self, key: &str, raw: &str) -> Result<TrainConfig> {
        let mut base = serde_json::to_value(self)?;
        let mut cursor = &mut base;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = cursor
                .as_object_mut()
                .ok_or_else(|| StepError::Config(format!("config key `{key}`: `{part}` is not a section")))?;
            if !obj.contains_key(*part) {
                return Err(StepError::Config(format!("unknown config key `{key}`")));
            }
            if i + 1 == parts.len() {
                let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
                obj.insert(part.to_string(), value);
                break;
            }
            cursor = obj.get_mut(*part).expect("checked above");
        }
        serde_json::from_value(base).map_err(|e| StepError::Config(format!("config key `{key}`: {e}")))
    }
}

fn merge_values(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge_values(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}
