//! Run configuration: one JSON document covering model, data, training and
//! protocol, with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{AsuError, Result};
use crate::model::{Ablation, ModelConfig};
use crate::region_encoder::EncoderConfig;
use crate::semantic_query::DEFAULT_TAU;
use crate::text_embed::Prompt;
use crate::train::data::DatasetSpec;
use crate::train::TrainConfig;
use crate::video_decoder::DecoderConfig;

pub const SEED_ENV: &str = "ASU_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Full,
    Fewshot,
    Zeroshot,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Fewshot => "fewshot",
            Mode::Zeroshot => "zeroshot",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = AsuError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "fewshot" => Ok(Mode::Fewshot),
            "zeroshot" => Ok(Mode::Zeroshot),
            other => Err(AsuError::Config(format!("unknown mode {other:?} (full, fewshot, zeroshot)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub mode: Mode,
    /// Training videos per class in few-shot mode.
    pub shots: usize,
    /// Classes held out in zero-shot mode.
    pub holdout: usize,
    /// Temporal clips averaged at evaluation.
    pub views: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            mode: Mode::Full,
            shots: 2,
            holdout: 2,
            views: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    pub prompt: Prompt,
    /// Seed of the pseudo text encoder.
    pub seed: u64,
    /// Externally exported unit embeddings, rows keyed by composed unit text.
    pub unit_embeddings: Option<PathBuf>,
    /// Externally exported label embeddings, rows keyed by label.
    pub label_embeddings: Option<PathBuf>,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            prompt: Prompt::default(),
            seed: 0,
            unit_embeddings: None,
            label_embeddings: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub tau: f64,
    pub ablation: Ablation,
    pub train: TrainConfig,
    pub data: DatasetSpec,
    pub text: TextConfig,
    /// Bank file; the synthetic vocabulary's bank when absent.
    pub bank: Option<PathBuf>,
    pub protocol: ProtocolConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            tau: DEFAULT_TAU,
            ablation: Ablation::FULL,
            train: TrainConfig::default(),
            data: DatasetSpec::default(),
            text: TextConfig::default(),
            bank: None,
            protocol: ProtocolConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            tau: self.tau,
            ablation: self.ablation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (enc, dec) = self.model().effective();
        enc.validate()?;
        dec.validate(enc.shared_dim)?;
        self.train.validate()?;
        self.data.validate()?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(AsuError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.data.height != enc.image_h || self.data.width != enc.image_w {
            return Err(AsuError::Config(format!(
                "data frames are {}x{} but the encoder expects {}x{}",
                self.data.height, self.data.width, enc.image_h, enc.image_w
            )));
        }
        if self.protocol.views == 0 {
            return Err(AsuError::Config("protocol.views must be at least 1".into()));
        }
        match self.protocol.mode {
            Mode::Fewshot if self.protocol.shots == 0 || self.protocol.shots > self.data.train_per_class() => {
                Err(AsuError::Config(format!(
                    "protocol.shots {} outside 1..={}",
                    self.protocol.shots,
                    self.data.train_per_class()
                )))
            }
            Mode::Zeroshot if self.protocol.holdout == 0 || self.protocol.holdout >= self.data.classes => {
                Err(AsuError::Config(format!(
                    "protocol.holdout {} must leave at least one of {} classes for training",
                    self.protocol.holdout, self.data.classes
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn from_value(v: Value) -> Result<Self> {
        serde_json::from_value(v).map_err(|e| AsuError::Config(e.to_string()))
    }

    pub fn to_value(&self) -> Result<Value> {
        Ok(serde_json::to_value(self)?)
    }

    /// Reads a config file, applies `key=value` overrides and the seed
    /// environment variable, and resolves relative paths against the file's
    /// directory.
    pub fn load(path: &Path, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AsuError::io(path, e))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| AsuError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_value_with(value, overrides, env_seed)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn from_value_with(mut value: Value, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg = Self::from_value(value)?;
        if let Some(s) = env_seed {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| AsuError::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        fix(&mut self.bank);
        fix(&mut self.text.unit_embeddings);
        fix(&mut self.text.label_embeddings);
    }
}

/// Sets `a.b.c=value` in a JSON object. The value is parsed as JSON when it
/// can be, otherwise taken as a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| AsuError::Config(format!("override {assignment:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(AsuError::Config(format!("bad override key {path:?}")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_owned()));
    let mut node = root;
    for k in &keys[..keys.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| AsuError::Config(format!("override {path:?}: {k:?} is not inside an object")))?;
        node = obj.entry(k.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| AsuError::Config(format!("override {path:?} does not address an object field")))?
        .insert(keys[keys.len() - 1].to_owned(), value);
    Ok(())
}
