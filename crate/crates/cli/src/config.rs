//! Run configuration: defaults, then the JSON file, then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use graphac::arena::TrainConfig;
use graphac::graph::{generate_synthetic_dataset, parse_graph_file, Graph, SyntheticConfig};
use graphac::tournament::Competitor;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const FULL_OUTPUT_DIM: usize = 256;

/// Where graphs come from: a JSONL file or the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    File(PathBuf),
    Synthetic(SyntheticConfig),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticConfig::default())
    }
}

impl DatasetSource {
    pub fn load(&self) -> Result<Vec<Graph>> {
        match self {
            DatasetSource::File(path) => {
                parse_graph_file(path).with_context(|| format!("reading dataset {}", path.display()))
            }
            DatasetSource::Synthetic(cfg) => Ok(generate_synthetic_dataset(cfg)?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    /// Optimisation, loss weights and seeds.
    pub train: TrainConfig,
    pub pool: Vec<Competitor>,
    pub workers: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            train: TrainConfig::desk(),
            pool: Vec::new(),
            workers: None,
            out_dir: None,
        }
    }
}

/// Flag values that override the file; `None` leaves the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub full_profile: bool,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seeds: Option<Vec<u64>>,
    pub mu: Option<f64>,
    pub lambda: Option<f64>,
    pub workers: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
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

impl RunConfig {
    fn profile(full: bool) -> Self {
        let mut cfg = Self::default();
        if full {
            cfg.train = TrainConfig::default();
        }
        cfg
    }

    /// Reads `path` over the selected profile and applies `flags`.
    pub fn load(path: &Path, flags: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let file: Value =
            serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", path.display()))?;
        let mut merged = serde_json::to_value(Self::profile(flags.full_profile))?;
        if matches!(file.get("dataset"), Some(Value::Object(_))) {
            // a file-given dataset replaces the default source wholesale
            merged["dataset"] = Value::Null;
        }
        merge(&mut merged, file);
        let mut cfg: RunConfig =
            serde_json::from_value(merged).with_context(|| format!("invalid config {}", path.display()))?;
        if let DatasetSource::File(p) = &mut cfg.dataset {
            if p.is_relative() {
                *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
            }
        }
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, f: &Overrides) {
        if f.full_profile {
            for c in &mut self.pool {
                c.spec.output_dim = FULL_OUTPUT_DIM;
            }
        }
        let t = &mut self.train;
        if let Some(v) = f.epochs {
            t.epochs = v;
            t.eval_window = t.eval_window.min(v);
        }
        if let Some(v) = f.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = f.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = &f.seeds {
            t.seeds = v.clone();
        }
        if let Some(v) = f.mu {
            t.loss.mu = v;
        }
        if let Some(v) = f.lambda {
            t.loss.lambda = v;
        }
        if f.workers.is_some() {
            self.workers = f.workers;
        }
        if f.out_dir.is_some() {
            self.out_dir = f.out_dir.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let DatasetSource::Synthetic(s) = &self.dataset {
            s.validate()?;
        }
        for c in &self.pool {
            c.spec
                .validate()
                .with_context(|| format!("pool entry {:?}", c.name))?;
        }
        if self.workers == Some(0) {
            bail!("workers must be >= 1");
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_is_recursive_and_file_wins() {
        let mut base = serde_json::json!({"a": {"x": 1, "y": 2}, "b": 3});
        merge(&mut base, serde_json::json!({"a": {"y": 5}, "c": 4}));
        assert_eq!(base, serde_json::json!({"a": {"x": 1, "y": 5}, "b": 3, "c": 4}));
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"train": {"loss": {"mu": 0.5}, "epochs": 7}, "dataset": {"file": "g.jsonl"}}"#,
        )
        .unwrap();
        let flags = Overrides {
            mu: Some(1.0),
            ..Overrides::default()
        };
        let cfg = RunConfig::load(&path, &flags).unwrap();
        assert_eq!(cfg.train.loss.mu, 1.0);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.dataset, DatasetSource::File(dir.path().join("g.jsonl")));
        let full = RunConfig::load(
            &path,
            &Overrides {
                full_profile: true,
                ..flags
            },
        )
        .unwrap();
        assert_eq!(full.train.batch_size, 512);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"train": {"epoch": 3}}"#).unwrap();
        let err = RunConfig::load(&path, &Overrides::default()).unwrap_err();
        assert!(format!("{err:#}").contains("epoch"), "{err:#}");
    }
}
