//! Engine configuration: one TOML document with per-module sections, plus
//! dotted `section.key=value` overrides applied before validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::metrics::EventThresholds;
use crate::numeric::optim::{OptimConfig, TrainConfig};
use crate::perceiver::PerceiverConfig;
use crate::rationale::{BackendKind, DecoderConfig, RemoteConfig, DEFAULT_RECENT};
use crate::selector::SelectorConfig;
use crate::stream::IngestMode;
use crate::synth::ScenarioConfig;
use crate::{Error, Result};

/// Decoder training runs on a capped, deterministic subsample of the
/// training chains; the full set is needlessly repetitive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderTrainConfig {
    pub max_pairs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
}

impl DecoderTrainConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optim: self.optim.clone(),
        }
    }
}

impl Default for DecoderTrainConfig {
    fn default() -> Self {
        Self {
            max_pairs: 600,
            epochs: 20,
            batch_size: 8,
            optim: OptimConfig {
                lr: 5e-3,
                warmup_steps: 20,
                weight_decay: 0.0,
                ..OptimConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub seed: u64,
    /// Evidence window in seconds.
    pub window: u64,
    pub tick_seconds: f64,
    /// Sentences kept as recent context besides the anchors.
    pub recent: usize,
    /// Commit a channel's pending seconds after this many unvoiced ticks.
    pub silence_commit: Option<u32>,
    pub ingest: IngestMode,
    pub backend: BackendKind,
    pub split: [f64; 3],
    pub perceiver: PerceiverConfig,
    pub selector: SelectorConfig,
    pub decoder: DecoderConfig,
    /// Shared by the perceiver and selector.
    pub train: TrainConfig,
    pub decoder_train: DecoderTrainConfig,
    pub synth: ScenarioConfig,
    pub remote: RemoteConfig,
    pub events: EventThresholds,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            window: 90,
            tick_seconds: 1.0,
            recent: DEFAULT_RECENT,
            silence_commit: None,
            ingest: IngestMode::Strict,
            backend: BackendKind::Template,
            split: crate::synth::DEFAULT_SPLIT,
            perceiver: PerceiverConfig::default(),
            selector: SelectorConfig::default(),
            decoder: DecoderConfig::default(),
            train: TrainConfig::default(),
            decoder_train: DecoderTrainConfig::default(),
            synth: ScenarioConfig::default(),
            remote: RemoteConfig::default(),
            events: EventThresholds::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("window must be >= 1 second".into()));
        }
        if !(self.tick_seconds > 0.0 && self.tick_seconds.is_finite()) {
            return Err(Error::Config("tick_seconds must be positive".into()));
        }
        if self.perceiver.emb_dim != self.selector.emb_dim {
            return Err(Error::Config(format!(
                "perceiver.emb_dim {} and selector.emb_dim {} differ",
                self.perceiver.emb_dim, self.selector.emb_dim
            )));
        }
        if self.synth.emb_dim != self.perceiver.emb_dim {
            return Err(Error::Config(format!(
                "synth.emb_dim {} and perceiver.emb_dim {} differ",
                self.synth.emb_dim, self.perceiver.emb_dim
            )));
        }
        self.perceiver.validate()?;
        self.selector.validate()?;
        self.decoder.validate()?;
        self.train.validate()?;
        self.decoder_train.train_config().validate()?;
        self.synth.validate()?;
        Ok(())
    }

    /// Parses TOML text, applies overrides, then validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut doc, ov)?;
        }
        let cfg: EngineConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` if given, else starts from the defaults.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 over the canonical JSON form, so key order and formatting of
    /// the source file do not matter.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&json)))
    }
}

/// Sets `a.b.c = value` in the document. The value is read as a TOML
/// literal and falls back to a bare string.
pub fn apply_override(doc: &mut toml::Table, entry: &str) -> Result<()> {
    let (key, raw) = entry
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {entry:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let slot = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = slot
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?} descends into a non-table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
