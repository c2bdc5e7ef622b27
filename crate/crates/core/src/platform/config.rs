//! TOML run configuration. A file only needs the keys it changes; missing
//! keys take the defaults below, unknown keys are rejected.

use crate::backbone::PretrainConfig;
use crate::error::{Error, Result};
use crate::evalharness::BenchConfig;
use crate::inference::Sampling;
use crate::losses::LossWeights;
use crate::trainer::{AblationFlags, StageConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Store root; `$SKETCH_CONCEPT_STORE` wins when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store: Option<PathBuf>,
    /// Base archive hash in the store, or a path to a `.skb` file. Empty
    /// means the most recently pretrained base recorded in the store.
    #[serde(default)]
    pub base: String,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub pairs: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    pub host: String,
    pub port: u16,
    /// Worker threads for jobs.
    pub workers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    pub paths: Paths,
    pub corpus: CorpusConfig,
    pub pretrain: PretrainConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub flags: AblationFlags,
    pub weights: LossWeights,
    pub sampling: Sampling,
    pub bench: BenchConfig,
    pub server: ServerConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            paths: Paths { store: None, base: String::new(), out: PathBuf::from("out") },
            corpus: CorpusConfig { pairs: 2000, seed: 0 },
            pretrain: PretrainConfig::default(),
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            flags: AblationFlags::default(),
            weights: LossWeights::default(),
            sampling: Sampling::default(),
            bench: BenchConfig::default(),
            server: ServerConfig { host: "127.0.0.1".into(), port: 8080, workers: 2 },
        }
    }
}

/// Overlay `over` onto `base`, recursing into tables.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let over: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut v = toml::Value::try_from(Config::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut v, over);
        let c: Config = v.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("config version {} is not supported (expected {CONFIG_VERSION})", self.version)));
        }
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.sampling.steps == 0 || self.bench.steps == 0 {
            return Err(Error::Config("sampling steps must be positive".into()));
        }
        if self.pretrain.batch == 0 || self.corpus.pairs == 0 || self.server.workers == 0 {
            return Err(Error::Config("batch, corpus size and worker count must be positive".into()));
        }
        Ok(())
    }
}
