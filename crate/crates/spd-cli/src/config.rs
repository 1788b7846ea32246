//! Run configuration file: a TOML document mirroring the model configuration
//! plus data paths and trainer settings. Unknown keys are rejected; command
//! line flags override file values.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use spd_core::trainer::TrainSettings;
use spd_core::{default_config, DenseLossForm, ModelConfig};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub trainer: TrainerSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub num_classes: Option<usize>,
    pub num_joints: Option<usize>,
    pub num_parts: Option<usize>,
    pub backbone_blocks: Option<Vec<(usize, usize)>>,
    pub context_channels: Option<usize>,
    pub lambda_s: Option<f64>,
    pub lambda_p: Option<f64>,
    pub lambda_d: Option<f64>,
    pub variant: Option<String>,
    pub seed: Option<u64>,
    pub dense_loss_form: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    pub iterations: Option<u64>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seeds: Option<Vec<u64>>,
    /// Debug mode: evaluate the targets against themselves.
    pub self_eval: Option<bool>,
}

/// Parses the file at `path`, rejecting unknown keys by name.
pub fn load(path: &Path) -> Result<RunConfigFile, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))
}

fn parse_form(s: &str) -> Result<DenseLossForm, String> {
    match s.to_ascii_lowercase().as_str() {
        "product" => Ok(DenseLossForm::Product),
        "sum" => Ok(DenseLossForm::Sum),
        other => Err(format!(
            "dense_loss_form must be \"product\" or \"sum\", got {other:?}"
        )),
    }
}

impl RunConfigFile {
    /// The model configuration: defaults, overridden by the file, overridden
    /// by the `--seed` / `--variant` flags.
    pub fn model_config(
        &self,
        seed_flag: Option<u64>,
        variant_flag: Option<&str>,
    ) -> Result<ModelConfig, String> {
        let mut c = default_config();
        let m = &self.model;
        if let Some(v) = m.num_classes {
            c.num_classes = v;
        }
        if let Some(v) = m.num_joints {
            c.num_joints = v;
        }
        if let Some(v) = m.num_parts {
            c.num_parts = v;
        }
        if let Some(v) = &m.backbone_blocks {
            c.backbone_blocks = v.clone();
        }
        if let Some(v) = m.context_channels {
            c.context_channels = v;
        }
        if let Some(v) = m.lambda_s {
            c.lambda_s = v;
        }
        if let Some(v) = m.lambda_p {
            c.lambda_p = v;
        }
        if let Some(v) = m.lambda_d {
            c.lambda_d = v;
        }
        if let Some(v) = &m.variant {
            c.variant = v.parse().map_err(|e: spd_core::Error| e.to_string())?;
        }
        if let Some(v) = m.seed {
            c.seed = v;
        }
        if let Some(v) = &m.dense_loss_form {
            c.dense_loss_form = parse_form(v)?;
        }
        if let Some(s) = seed_flag {
            c.seed = s;
        }
        if let Some(v) = variant_flag {
            c.variant = v.parse().map_err(|e: spd_core::Error| e.to_string())?;
        }
        c.validate().map_err(|e| e.to_string())?;
        Ok(c)
    }

    pub fn train_settings(&self) -> TrainSettings {
        let mut s = TrainSettings::default();
        if let Some(b) = self.trainer.batch_size {
            s.batch_size = b;
        }
        if let Some(lr) = self.trainer.learning_rate {
            s.adam.lr = lr;
        }
        s
    }

    pub fn iterations(&self) -> u64 {
        self.trainer.iterations.unwrap_or(300)
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.trainer.seeds.clone().unwrap_or_else(|| vec![1, 2, 3])
    }
}
