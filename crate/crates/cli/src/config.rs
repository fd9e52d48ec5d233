//! Layered configuration: built-in defaults, then the TOML file, then flags.
//!
//! The file has optional top-level `seed` and `precision` keys and one table
//! per concern (`data`, `model`, `train`, `eval`, `spectrogram`). Tables may
//! be partial; missing keys keep their defaults.

use std::fs;
use std::path::{Path, PathBuf};

use avfsnet::config::ModelConfig;
use avfsnet::data_synth::Split;
use avfsnet::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub tau: f64,
    pub split: Split,
    /// Replace model probabilities with ground-truth presence.
    pub oracle_probabilities: bool,
    pub max_samples: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { tau: 0.5, split: Split::Test, oracle_probabilities: false, max_samples: None }
    }
}

/// The parsed file, kept as raw tables until each command resolves the
/// sections it uses.
#[derive(Debug, Default)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
    tables: Table,
}

const SECTIONS: [&str; 5] = ["data", "model", "train", "eval", "spectrogram"];

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut tables: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let seed = match tables.remove("seed") {
            None => None,
            Some(Value::Integer(s)) if s >= 0 => Some(s as u64),
            Some(v) => return Err(Error::Config(format!("seed must be a non-negative integer, got {v}"))),
        };
        let precision = tables.remove("precision").map(|v| v.try_into()).transpose().map_err(de_err)?;
        for (k, v) in &tables {
            if !SECTIONS.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
            if !v.is_table() {
                return Err(Error::Config(format!("`{k}` must be a table")));
            }
        }
        Ok(Self { seed, precision, tables })
    }

    /// `base` with the named section merged over it.
    pub fn section<T: Serialize + DeserializeOwned>(&self, name: &str, base: &T) -> Result<T> {
        let mut v = Value::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(over) = self.tables.get(name) {
            merge(&mut v, over.clone());
        }
        v.try_into().map_err(|e: toml::de::Error| Error::Config(format!("[{name}] {}", e.message())))
    }
}

fn de_err(e: toml::de::Error) -> Error {
    Error::Config(e.message().to_string())
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn model_preset(name: &str) -> Result<ModelConfig> {
    match name {
        "desk" => Ok(ModelConfig::desk()),
        "tiny" => Ok(ModelConfig::tiny()),
        "paper" => Ok(ModelConfig::paper()),
        other => Err(Error::Config(format!("unknown model preset `{other}` (desk, tiny, paper)"))),
    }
}

/// Writes `resolved_config.toml` into `dir`: the seed, the precision and
/// each resolved section.
pub fn echo(dir: &Path, seed: u64, precision: Option<Precision>, sections: &[(&str, Value)]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    let mut t = Table::new();
    t.insert("seed".into(), Value::Integer(seed as i64));
    if let Some(p) = precision {
        t.insert("precision".into(), Value::try_from(p).map_err(|e| Error::Config(e.to_string()))?);
    }
    for (k, v) in sections {
        t.insert((*k).into(), v.clone());
    }
    let path = dir.join("resolved_config.toml");
    let text = toml::to_string_pretty(&t).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    Ok(path)
}

pub fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    Value::try_from(v).map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_sections_merge_over_defaults() {
        let f = FileConfig::parse("seed = 7\n[model]\ndim = 32\n[model.separator]\nchunk = 40\n").unwrap();
        assert_eq!(f.seed, Some(7));
        let m = f.section("model", &ModelConfig::desk()).unwrap();
        assert_eq!(m.dim, 32);
        assert_eq!(m.separator.chunk, 40);
        assert_eq!(m.separator.heads, ModelConfig::desk().separator.heads);
        assert_eq!(f.section("eval", &EvalSection::default()).unwrap(), EvalSection::default());
    }

    #[test]
    fn rejects_unknown_keys_and_types() {
        assert!(matches!(FileConfig::parse("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(FileConfig::parse("model = 3"), Err(Error::Config(_))));
        assert!(matches!(FileConfig::parse("seed = -1"), Err(Error::Config(_))));
        let f = FileConfig::parse("[model]\nwidth = 3\n").unwrap();
        assert!(matches!(f.section("model", &ModelConfig::desk()), Err(Error::Config(_))));
        assert!(matches!(FileConfig::parse("[model\n"), Err(Error::Config(_))));
    }
}
