//! Run configuration files: TOML with dotted-key overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::SpeedSetup;
use crate::config::ModelConfig;
use crate::data::SynthKind;
use crate::error::{Error, Result};
use crate::objectives::ObjectiveSpec;
use crate::reparam::ReparamSpec;
use crate::trainer::TrainConfig;

fn d_max_vocab() -> usize {
    5000
}

fn d_max_len() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskConfig {
    Synth {
        kind: SynthKind,
        train_size: usize,
        dev_size: usize,
        vocab_size: usize,
        #[serde(default)]
        seed: u64,
    },
    Tsv {
        train: PathBuf,
        dev: PathBuf,
        #[serde(default = "d_max_vocab")]
        max_vocab: usize,
        #[serde(default = "d_max_len")]
        max_len: usize,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    /// Trained teacher to load.
    pub checkpoint: Option<PathBuf>,
    /// Architecture for `train-teacher`, or for benchmarks without a
    /// checkpoint.
    pub model: Option<ModelConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatedSection {
    /// Pre-trained student-shaped model that provides the base weights.
    pub base_checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskConfig,
    #[serde(default)]
    pub teacher: TeacherSection,
    pub student: Option<ModelConfig>,
    pub gated: Option<GatedSection>,
    #[serde(default)]
    pub reparam: ReparamSpec,
    #[serde(default)]
    pub objective: ObjectiveSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub bench: SpeedSetup,
    pub out_dir: Option<PathBuf>,
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `a.b.c = value` in `table`, creating intermediate tables. Values
/// parse as TOML and fall back to plain strings.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses `text` after applying `overrides` in order.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let TaskConfig::Tsv { train, dev, .. } = &mut self.task {
            fix(train);
            fix(dev);
        }
        if let Some(p) = &mut self.teacher.checkpoint {
            fix(p);
        }
        if let Some(g) = &mut self.gated {
            fix(&mut g.base_checkpoint);
        }
        if let Some(p) = &mut self.out_dir {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.objective.validate()?;
        for m in [&self.teacher.model, &self.student].into_iter().flatten() {
            m.validate()?;
        }
        if let TaskConfig::Synth { train_size, dev_size, .. } = self.task {
            if train_size == 0 || dev_size == 0 {
                return Err(Error::Config("synthetic task sizes must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
