//! Run configuration: a TOML file with five sections, merged with
//! `--set section.key=value` overrides. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use camalign_core::{ModelConfig, TrainConfig, Variant};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub vtac: VtacSection,
    pub data: DataSection,
    pub decode: DecodeSection,
}

/// Encoder-decoder shape. Image size, vocabulary size and class count are
/// taken from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Encoder and decoder layers. Default 2.
    pub layers: usize,
    /// Attention heads. Default 4.
    pub heads: usize,
    /// Hidden size. Default 64.
    pub dim: usize,
    /// Feed-forward width. Default 128.
    pub ffn_dim: usize,
    /// Visual token channels. Default 32.
    pub channels: usize,
    /// Channels after the first convolution. Default 16.
    pub hidden_channels: usize,
    /// Pixels per patch side. Default 4.
    pub patch: usize,
    /// Longest report in tokens, excluding BOS. Default 60.
    pub max_len: usize,
    /// Sinusoidal positions on visual and word tokens. Default true.
    pub position_encoding: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk();
        Self {
            layers: d.layers,
            heads: d.heads,
            dim: d.dim,
            ffn_dim: d.ffn_dim,
            channels: d.channels,
            hidden_channels: d.hidden_channels,
            patch: d.patch,
            max_len: d.max_len,
            position_encoding: d.position_encoding,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// base, vdmae or full. Default full.
    pub variant: Variant,
    /// Learning rate of the extractor and class head. Default 1e-3.
    pub lr_ve: f64,
    /// Learning rate of the encoder-decoder. Default 2e-3.
    pub lr_ed: f64,
    /// Weight of the classification loss. Default 1.0.
    pub lambda: f64,
    /// Epoch budget. Default 100.
    pub epochs: usize,
    /// Default 8.
    pub batch_size: usize,
    /// Epochs without validation BLEU-4 improvement before stopping. Default 10.
    pub patience: usize,
    /// Seeds initialization and shuffling. Default 0.
    pub seed: u64,
    /// Beam width for validation decoding. Default 1.
    pub val_beam: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            variant: t.variant,
            lr_ve: t.lr_ve,
            lr_ed: t.lr_ed,
            lambda: t.lambda,
            epochs: t.epochs,
            batch_size: t.batch_size,
            patience: t.patience,
            seed: t.seed,
            val_beam: t.val_beam,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VtacSection {
    /// Weight of the attention-consistency loss. Default 0.15.
    pub delta: f64,
    /// Proportion of words selected as important. Default 0.25.
    pub k: f64,
}

impl Default for VtacSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { delta: t.delta, k: t.k }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding train.jsonl, val.jsonl and test.jsonl. Default "data".
    pub dir: PathBuf,
    /// Minimum training-split count for a vocabulary word. Default 1.
    pub min_freq: usize,
    /// Vocabulary size cap including reserved tokens; 0 means no cap. Default 0.
    pub max_vocab: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            min_freq: 1,
            max_vocab: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    /// Beam width for generation. Default 3.
    pub beam: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self { beam: 3 }
    }
}

impl RunConfig {
    /// Reads `path` (if any) and applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>().with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.decode.beam == 0 {
            bail!("decode.beam must be at least 1");
        }
        if self.model.max_len == 0 {
            bail!("model.max_len must be at least 1");
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            variant: t.variant,
            lr_ve: t.lr_ve,
            lr_ed: t.lr_ed,
            lambda: t.lambda,
            delta: self.vtac.delta,
            k: self.vtac.k,
            epochs: t.epochs,
            batch_size: t.batch_size,
            patience: t.patience,
            seed: t.seed,
            val_beam: t.val_beam,
        }
    }

    /// Full model shape once the dataset fixes the remaining sizes.
    pub fn model_config(&self, image_size: usize, vocab: usize, classes: usize) -> Result<ModelConfig> {
        let m = &self.model;
        let cfg = ModelConfig {
            layers: m.layers,
            heads: m.heads,
            dim: m.dim,
            ffn_dim: m.ffn_dim,
            channels: m.channels,
            hidden_channels: m.hidden_channels,
            image_size,
            patch: m.patch,
            vocab,
            max_len: m.max_len,
            classes,
            position_encoding: m.position_encoding,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// `section.key=value`; the value is parsed as a TOML literal and falls back
/// to a plain string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!("override {spec:?} is not of the form section.key=value");
    };
    let Some((section, field)) = key.trim().split_once('.') else {
        bail!("override key {key:?} is not of the form section.key");
    };
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let Some(sec) = entry.as_table_mut() else {
        bail!("config entry {section:?} is not a section");
    };
    sec.insert(field.to_string(), value);
    Ok(())
}
