//! Layered run configuration: defaults, then a JSON file, then flags.

use std::path::PathBuf;

use clap::Args;
use step_core::pipeline::TrainConfig;
use step_core::{Result, StepError};

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON config file merged over the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Data directory (overrides `data.dir`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_curriculum: bool,
    #[arg(long)]
    pub no_task1: bool,
    #[arg(long)]
    pub no_task2: bool,
    #[arg(long)]
    pub no_task3: bool,
    /// Train both heads together instead of rec then conv.
    #[arg(long)]
    pub joint: bool,
    /// `dotted.key=value` override, applied last. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| StepError::io(path, e))?;
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| StepError::Config(format!("{}: {e}", path.display())))?;
            cfg = cfg.merge_json(&value)?;
        }
        if let Some(dir) = &self.data {
            cfg.data.dir = dir.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.ablation.no_curriculum |= self.no_curriculum;
        cfg.ablation.no_task1 |= self.no_task1;
        cfg.ablation.no_task2 |= self.no_task2;
        cfg.ablation.no_task3 |= self.no_task3;
        cfg.optim.joint |= self.joint;
        for kv in &self.overrides {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| StepError::Config(format!("override `{kv}` is not KEY=VALUE")))?;
            cfg = cfg.set_dotted(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
