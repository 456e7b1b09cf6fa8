use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::amg::GeneratorConfig;
use crate::deto::DetoConfig;
use crate::error::{Result, SokeError};
use crate::metrics::MetricsConfig;
use crate::motion::SynthConfig;
use crate::posefit::FitConfig;
use crate::retrieval::RetrievalConfig;

/// How the synthetic corpus is split and how dictionary instances are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Extra sentences drawn after the training sentences and held out.
    /// Word sequences that also occur in training are dropped.
    pub heldout_sentences: usize,
    /// Isolated-sign instances per lexicon word for the dictionary.
    pub instances_per_word: usize,
    /// Uniform noise amplitude on each isolated instance (radians).
    pub instance_noise: f64,
    /// Draw held-out sentences with uniform word frequencies, so rare
    /// training words are as common as frequent ones.
    pub heldout_uniform_words: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            heldout_sentences: 30,
            instances_per_word: 3,
            instance_noise: 0.02,
            heldout_uniform_words: false,
        }
    }
}

/// Everything one run depends on besides its input files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub deto: DetoConfig,
    pub amg: GeneratorConfig,
    pub retrieval: RetrievalConfig,
    pub metrics: MetricsConfig,
    pub posefit: FitConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthConfig::default(),
            data: DataConfig::default(),
            deto: DetoConfig::default(),
            amg: GeneratorConfig::default(),
            retrieval: RetrievalConfig::on(),
            metrics: MetricsConfig::default(),
            posefit: FitConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.deto.validate()?;
        self.amg.validate()?;
        self.posefit.validate()?;
        if self.deto.layout != self.synth.layout {
            return Err(SokeError::Config("deto.layout must equal synth.layout".into()));
        }
        if self.synth.n_sentences == 0 {
            return Err(SokeError::Config("synth.n_sentences must be positive".into()));
        }
        Ok(())
    }

    /// Parses TOML, applies `key=value` overrides, then validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| SokeError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| SokeError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` (or defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => {
                fs::read_to_string(p).map_err(|e| SokeError::Config(format!("cannot read {}: {e}", p.display())))?
            }
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| SokeError::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        sha256_hex(json.as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Sets a dotted key, e.g. `amg.mode=sequential` or `deto.train.epochs=50`.
/// The value is read as a TOML literal, falling back to a bare string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| SokeError::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let path: Vec<&str> = key.split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(SokeError::Config(format!("bad override key {key:?}")));
    }
    let mut cur = root;
    for seg in &path[..path.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| SokeError::Config(format!("override {key:?} descends into a non-table")))?;
        cur = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    cur.as_table_mut()
        .ok_or_else(|| SokeError::Config(format!("override {key:?} descends into a non-table")))?
        .insert(path[path.len() - 1].to_string(), parsed);
    Ok(())
}
