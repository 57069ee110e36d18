//! Shared TOML configuration for every command.
//!
//! Any key can be overridden from the environment: `GROUNDCHAT_` followed
//! by the section path joined with `__`, e.g. `GROUNDCHAT_TRAIN__LR=1e-4` or
//! `GROUNDCHAT_SERVICE__BIND=0.0.0.0:9000`. Values are read as TOML scalars
//! when they parse as one and as strings otherwise.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::TargetSide;
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::expansion::{ExpansionType, PrefixTable};
use crate::model::ModelConfig;
use crate::synthetic::SyntheticConfig;
use crate::training::TrainConfig;

pub const ENV_PREFIX: &str = "GROUNDCHAT_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Line-delimited persona and dialog records.
    pub corpus: Option<PathBuf>,
    /// Precomputed expansion records.
    pub expansions: Option<PathBuf>,
    pub dnli: Option<PathBuf>,
    /// Line-delimited edited-persona cases.
    pub edited_cases: Option<PathBuf>,
    /// Number of exchanges kept before each target.
    pub history_size: usize,
    pub target_side: TargetSide,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            expansions: None,
            dnli: None,
            edited_cases: None,
            history_size: 2,
            target_side: TargetSide::Both,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpansionConfig {
    /// `mock` or `file:PATH`.
    pub backend: String,
    pub relations: Vec<ExpansionType>,
    pub paraphrase: bool,
    pub beams: usize,
    pub seed: u64,
    /// Replaces entries of the built-in prefix table.
    pub prefixes: BTreeMap<ExpansionType, String>,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            backend: "mock".into(),
            relations: ExpansionType::RELATIONS.to_vec(),
            paraphrase: false,
            beams: 5,
            seed: 0,
            prefixes: BTreeMap::new(),
        }
    }
}

impl ExpansionConfig {
    pub fn prefix_table(&self) -> PrefixTable {
        self.prefixes
            .iter()
            .fold(PrefixTable::default(), |t, (k, v)| t.with_override(*k, v))
    }

    pub fn kinds(&self) -> Vec<ExpansionType> {
        let mut k = self.relations.clone();
        if self.paraphrase {
            k.push(ExpansionType::Paraphrase);
        }
        k
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(k) = self.relations.iter().find(|k| !k.is_relation()) {
            return Err(Error::Config(format!("expansion.relations: {k} is not a relation")));
        }
        if self.backend != "mock" && !self.backend.starts_with("file:") {
            return Err(Error::Config(format!(
                "expansion.backend must be `mock` or `file:PATH`, got {:?}",
                self.backend
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub min_count: usize,
    pub max_words: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            min_count: 1,
            max_words: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    /// Session database file.
    pub store: PathBuf,
    pub prior_topk: usize,
    /// Directory of prebuilt web assets served under `/`.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            store: PathBuf::from("sessions.redb"),
            prior_topk: 10,
            static_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    /// Where `train` writes and other commands read checkpoints.
    pub checkpoint_dir: PathBuf,
    pub data: DataConfig,
    pub expansion: ExpansionConfig,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub service: ServiceConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            checkpoint_dir: PathBuf::from("checkpoints"),
            data: DataConfig::default(),
            expansion: ExpansionConfig::default(),
            tokenizer: TokenizerConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            service: ServiceConfig::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

fn env_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path crosses non-table key {p}")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl AppConfig {
    /// Parses `text` and applies `GROUNDCHAT_*` pairs from `env`.
    pub fn from_toml_with_env<I>(text: &str, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k.len() > ENV_PREFIX.len())
            .collect();
        overrides.sort();
        for (key, raw) in overrides {
            let path: Vec<String> = key[ENV_PREFIX.len()..]
                .split("__")
                .map(|s| s.to_ascii_lowercase())
                .collect();
            set_path(&mut table, &path, env_value(&raw))?;
        }
        let cfg: AppConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (defaults when `None`) plus the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_with_env(&text, std::env::vars())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.decode.validate()?;
        self.expansion.validate()?;
        if self.service.prior_topk == 0 {
            return Err(Error::Config("service.prior_topk must be at least 1".into()));
        }
        Ok(())
    }
}
