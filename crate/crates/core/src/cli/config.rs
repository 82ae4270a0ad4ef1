//! Layered run configuration: file values, then `key=value` overrides, then defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::SyntheticCorpusSpec;
use crate::datrain::{DaTrainConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::evalharness::{EvalConfig, ExperimentPlan, FinetuneConfig, ImportanceConfig, Stages, Variant};
use crate::model::ModelConfig;

pub const CONFIG_ECHO_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub variants: Vec<Variant>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { run_dir: PathBuf::from("run") }
    }
}

/// Every knob of the pipeline, one section per module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub corpus_seed: u64,
    pub model: ModelConfig,
    pub corpus: SyntheticCorpusSpec,
    pub pretrain: PretrainConfig,
    pub importance: ImportanceConfig,
    pub datrain: DaTrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub stages: Stages,
    pub ablate: AblateConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            corpus_seed: 0,
            model: ModelConfig::default(),
            corpus: SyntheticCorpusSpec::default(),
            pretrain: PretrainConfig::default(),
            importance: ImportanceConfig::default(),
            datrain: DaTrainConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
            stages: Stages::default(),
            ablate: AblateConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn section<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{name}: {m}")),
        other => Error::Config(format!("{name}: {other}")),
    })
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed".into()));
        }
        section("model", self.model.validate())?;
        section("corpus", self.corpus.validate(Some(self.model.max_seq_len)))?;
        section("pretrain", self.pretrain.as_da_config().validate())?;
        section("datrain", self.datrain.validate())?;
        section("finetune", self.finetune.validate())?;
        if self.importance.subset_batches == 0 || self.importance.batch_size == 0 {
            return Err(Error::Config("importance: subset_batches >= 1 and batch_size >= 1".into()));
        }
        if self.ablate.variants.is_empty() {
            return Err(Error::Config("ablate.variants: at least one variant".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Writes the resolved configuration to `dir/config.toml`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(CONFIG_ECHO_FILE);
        fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }

    pub fn experiment_plan(&self, output_dir: PathBuf) -> ExperimentPlan {
        ExperimentPlan {
            model: self.model.clone(),
            corpus: self.corpus.clone(),
            corpus_seed: self.corpus_seed,
            pretrain: self.pretrain.clone(),
            importance: self.importance.clone(),
            datrain: self.datrain.clone(),
            finetune: self.finetune.clone(),
            eval: self.eval.clone(),
            stages: self.stages.clone(),
            seeds: self.seeds.clone(),
            variants: self.ablate.variants.clone(),
            output_dir,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `a.b.c = value` in `table`, creating intermediate sections.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override `{spec}` has an empty key segment")));
    }
    let (last, prefix) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for (i, p) in prefix.iter().enumerate() {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{} is not a section", parts[..=i].join("."))))?;
    }
    cur.insert(last.to_string(), parse_value(value));
    Ok(())
}

/// Resolves a configuration from an optional file plus `key=value` overrides.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("{path}: {}", e.into_inner().message()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_nest() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "datrain.tau=0.1").unwrap();
        apply_override(&mut t, "paths.run_dir=out/x").unwrap();
        assert_eq!(t["datrain"]["tau"].as_float(), Some(0.1));
        assert_eq!(t["paths"]["run_dir"].as_str(), Some("out/x"));
        assert!(apply_override(&mut t, "datrain").is_err());
        assert!(apply_override(&mut t, "datrain.tau.x=1").is_err());
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
