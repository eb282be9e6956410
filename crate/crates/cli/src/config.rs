//! Experiment configuration: a TOML file, overridable per-key through
//! `MSNMT_<SECTION>_<KEY>` environment variables and a few dedicated
//! command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use msnmt_core::model::ModelConfig;
use msnmt_core::training::TrainConfig;
use msnmt_core::Policy;

/// Wait-k field that reads either an integer or the string "full".
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicyField {
    Num(usize),
    Name(String),
}

impl PolicyField {
    pub fn to_policy(&self) -> Result<Policy> {
        match self {
            PolicyField::Num(k) => Ok(Policy::new_wait_k(*k)?),
            PolicyField::Name(s) => s
                .parse()
                .map_err(|e: msnmt_core::Error| anyhow!("bad policy {s:?}: {e}")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_source: PathBuf,
    pub train_target: PathBuf,
    pub dev_source: PathBuf,
    pub dev_target: PathBuf,
    pub image_ids: Option<PathBuf>,
    pub dev_image_ids: Option<PathBuf>,
    pub features: Option<PathBuf>,
    #[serde(default = "default_vocab_cap")]
    pub vocab_cap: usize,
}

fn default_vocab_cap() -> usize {
    10_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub multimodal: bool,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub image_dim: usize,
    pub image_seq: usize,
    pub attn_dim: usize,
    pub dropout_src_emb: f64,
    pub dropout_enc_state: f64,
    pub dropout_pre_softmax: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        ModelSection {
            multimodal: d.multimodal,
            embed_dim: d.embed_dim,
            hidden_dim: d.hidden_dim,
            image_dim: d.image_dim,
            image_seq: d.image_seq,
            attn_dim: d.attn_dim,
            dropout_src_emb: d.dropout_src_emb,
            dropout_enc_state: d.dropout_enc_state,
            dropout_pre_softmax: d.dropout_pre_softmax,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub k: PolicyField,
    pub seed: u64,
    pub max_epochs: usize,
    pub clip_norm: Option<f64>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            learning_rate: 0.0004,
            batch_size: 64,
            patience: 15,
            k: PolicyField::Num(3),
            seed: 1,
            max_epochs: 100,
            clip_norm: None,
        }
    }
}

/// Two-stage multimodal schedule knobs (ignored for text-only runs).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub pretrain_patience: usize,
    pub finetune_batch_size: usize,
    pub finetune_patience: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            pretrain_patience: 10,
            finetune_batch_size: 32,
            finetune_patience: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
}

pub const ENV_PREFIX: &str = "MSNMT_";

impl ExperimentConfig {
    /// Loads the TOML file, then applies `MSNMT_<SECTION>_<KEY>`
    /// environment overrides before deserializing, so an unknown
    /// override key fails with the same naming as an unknown file key.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut table: toml::Table = text
            .parse()
            .with_context(|| format!("parsing config {}", path.display()))?;
        for (key, value) in std::env::vars() {
            let Some(rest) = key.strip_prefix(ENV_PREFIX) else { continue };
            apply_env_override(&mut table, rest, &value)
                .with_context(|| format!("applying override {key}"))?;
        }
        let cfg: ExperimentConfig = table
            .try_into()
            .with_context(|| format!("invalid config {}", path.display()))?;
        if cfg.training.learning_rate <= 0.0 {
            bail!("learning_rate must be positive");
        }
        Ok(cfg)
    }

    pub fn model_config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size,
            embed_dim: m.embed_dim,
            hidden_dim: m.hidden_dim,
            image_dim: m.image_dim,
            image_seq: m.image_seq,
            attn_dim: m.attn_dim,
            dropout_src_emb: m.dropout_src_emb,
            dropout_enc_state: m.dropout_enc_state,
            dropout_pre_softmax: m.dropout_pre_softmax,
            multimodal: m.multimodal,
            seed,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.training;
        Ok(TrainConfig {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            patience: t.patience,
            policy: t.k.to_policy()?,
            seed: t.seed,
            max_epochs: t.max_epochs,
            clip_norm: t.clip_norm,
        })
    }
}

/// `rest` is `SECTION_KEY[_MORE]`; the section is the first segment,
/// the key the remainder lowercased. The value is parsed as a TOML
/// literal, falling back to a plain string.
fn apply_env_override(table: &mut toml::Table, rest: &str, value: &str) -> Result<()> {
    let (section, key) = rest
        .split_once('_')
        .ok_or_else(|| anyhow!("expected {ENV_PREFIX}SECTION_KEY"))?;
    let section = section.to_ascii_lowercase();
    let key = key.to_ascii_lowercase();
    let parsed: toml::Value = match format!("x = {value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("x").unwrap(),
        Err(_) => toml::Value::String(value.to_string()),
    };
    table
        .entry(section)
        .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        .as_table_mut()
        .ok_or_else(|| anyhow!("config section is not a table"))?
        .insert(key, parsed);
    Ok(())
}
