//! The run configuration document shared by all CLI subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{CorpusConfig, SplitSpec};
use crate::pipeline::TrainConfig;

/// Order in which training-time preprocessing is applied.
pub const PREPROCESSING_ORDER: &str = "intensity,translate,mean_normalize";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid override {0:?}: expected key=value")]
    Override(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Corpus directory holding `manifest.jsonl` and `images/`.
    pub data_dir: PathBuf,
    /// Training and evaluation outputs.
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { data_dir: "data".into(), run_dir: "runs/default".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Append the human intra-analyser row to reports.
    pub reference_row: bool,
    pub bench_runs: usize,
    pub bench_warmup: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { reference_row: false, bench_runs: 20, bench_warmup: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the corpus, split and training seeds.
    pub seed: Option<u64>,
    pub preprocessing_order: String,
    pub paths: PathsConfig,
    pub corpus: CorpusConfig,
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            preprocessing_order: PREPROCESSING_ORDER.to_string(),
            paths: PathsConfig::default(),
            corpus: CorpusConfig::default(),
            split: SplitSpec::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    /// Reads `path` (defaults when `None`), applies `key=value` overrides, resolves seeds and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let base = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.display().to_string(), source })?,
            None => String::new(),
        };
        let mut tree: toml::Table = toml::from_str(&base).map_err(|e| ConfigError::Parse(e.to_string()))?;
        // round-trip through the typed form so overrides land on a complete document
        let typed: RunConfig = tree.clone().try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        tree = toml::Table::try_from(&typed).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let mut cfg: RunConfig = tree.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.resolve_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_seed(&mut self) {
        if let Some(s) = self.seed {
            self.corpus.seed = s;
            self.split.seed = s;
            self.train.seed = s;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.preprocessing_order != PREPROCESSING_ORDER {
            return Err(ConfigError::Invalid(format!(
                "preprocessing_order must be {PREPROCESSING_ORDER:?}, got {:?}",
                self.preprocessing_order
            )));
        }
        self.split.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.eval.bench_runs == 0 {
            return Err(ConfigError::Invalid("eval.bench_runs must be positive".into()));
        }
        Ok(())
    }

    /// Writes the resolved configuration as `config.toml` in `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml())?;
        Ok(path)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets a dotted `key=value` in a TOML tree. Unknown keys are caught when
/// the tree is deserialized.
pub fn apply_override(tree: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, value) = assignment.split_once('=').ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(assignment.to_string()));
    }
    let mut table = tree;
    for part in &parts[..parts.len() - 1] {
        table = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError::Invalid(format!("{key}: {part} is not a section")))?;
    }
    let mut v = parse_value(value.trim());
    // integer literals for float fields
    if let (Some(toml::Value::Float(_)), toml::Value::Integer(i)) = (table.get(parts[parts.len() - 1]), &v) {
        v = toml::Value::Float(*i as f64);
    }
    table.insert(parts[parts.len() - 1].to_string(), v);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[train]\nepochz = 3").is_err());
        assert!(RunConfig::load(None, &["train.model.widht=3".into()]).is_err());
    }

    #[test]
    fn overrides_and_seed() {
        let cfg = RunConfig::load(
            None,
            &["train.epochs=3".into(), "train.lr_initial=1".into(), "seed=7".into(), "paths.run_dir=out/x".into(), "train.model.downsample=\"avg_pool\"".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr_initial, 1.0);
        assert_eq!((cfg.corpus.seed, cfg.split.seed, cfg.train.seed), (7, 7, 7));
        assert_eq!(cfg.paths.run_dir, PathBuf::from("out/x"));
        assert_eq!(cfg.train.model.downsample, crate::model::Downsample::AvgPool);
        assert!(matches!(RunConfig::load(None, &["novalue".into()]), Err(ConfigError::Override(_))));
        assert!(RunConfig::load(None, &["train.lr_decay_factor=2.0".into()]).is_err());
    }

    #[test]
    fn snapshot_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::load(None, &["corpus.n_patients=5".into()]).unwrap();
        let path = cfg.write_snapshot(dir.path()).unwrap();
        assert_eq!(RunConfig::load(Some(&path), &[]).unwrap(), cfg);
    }
}
