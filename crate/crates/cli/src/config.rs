use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sfao_core::{OptimizerConfig, StreamConfig, Thresholds, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub stream: StreamConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Independent runs executed at once.
    pub workers: usize,
    /// Also write the final model and buffers of every run.
    pub checkpoint: bool,
    pub sweep: Option<SweepConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            stream: StreamConfig::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![0],
            output_dir: PathBuf::from("out"),
            workers: 1,
            checkpoint: false,
            sweep: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub grid: Vec<GridPoint>,
    /// Projection threshold paired with bare accept values in the grid.
    #[serde(default = "default_sweep_proj")]
    pub lambda_proj: f64,
}

fn default_sweep_proj() -> f64 {
    -1e-4
}

/// A bare number sets the accept threshold; a pair sets both.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridPoint {
    Accept(f64),
    Pair([f64; 2]),
}

impl SweepConfig {
    pub fn thresholds(&self) -> Result<Vec<Thresholds>> {
        if self.grid.is_empty() {
            bail!("sweep grid is empty");
        }
        self.grid
            .iter()
            .map(|p| {
                let (proj, accept) = match *p {
                    GridPoint::Accept(a) => (self.lambda_proj, a),
                    GridPoint::Pair([p, a]) => (p, a),
                };
                Thresholds::new(proj, accept).map_err(Into::into)
            })
            .collect()
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut value: Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(value).context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.optimizer.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            bail!("seeds must not be empty");
        }
        if self.workers == 0 {
            bail!("workers must be positive");
        }
        if let Some(s) = &self.sweep {
            s.thresholds()?;
        }
        Ok(())
    }
}

/// Applies `dotted.path=value`. The value is read as JSON when it parses and
/// as a plain string otherwise.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override {spec:?} is not of the form key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            bail!("override {spec:?} has an empty key");
        }
        let obj = match node {
            Value::Object(map) => map,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just set")
            }
            _ => bail!(
                "override {spec:?}: {} is not an object",
                keys[..i].join(".")
            ),
        };
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert(Value::Null);
    }
    unreachable!("split always yields at least one key")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_set_nested_fields() {
        let mut v = json!({"optimizer": {"lr": 0.1}});
        apply_override(&mut v, "optimizer.lr=0.01").unwrap();
        apply_override(&mut v, "train.epochs=3").unwrap();
        apply_override(&mut v, "optimizer.method=ogd").unwrap();
        assert_eq!(
            v,
            json!({"optimizer": {"lr": 0.01, "method": "ogd"}, "train": {"epochs": 3}})
        );
        assert!(apply_override(&mut v, "optimizer.lr.x=1").is_err());
        assert!(apply_override(&mut v, "novalue").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let v = json!({"optimizer": {"learning_rate": 0.1}});
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
        let v = json!({"colour": 1});
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
    }

    #[test]
    fn empty_config_is_the_default() {
        let cfg: ExperimentConfig = serde_json::from_value(json!({})).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn grid_points() {
        let s: SweepConfig = serde_json::from_value(json!({"grid": [0.9, [-1, 1]]})).unwrap();
        let th = s.thresholds().unwrap();
        assert_eq!((th[0].lambda_proj(), th[0].lambda_accept()), (-1e-4, 0.9));
        assert_eq!(th[1], Thresholds::always_project());
        let empty = SweepConfig {
            grid: vec![],
            lambda_proj: 0.0,
        };
        assert!(empty.thresholds().is_err());
        let bad: SweepConfig = serde_json::from_value(json!({"grid": [[0.9, 0.1]]})).unwrap();
        assert!(bad.thresholds().is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = ExperimentConfig::default();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.optimizer.lr = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.stream.tasks = 3;
        assert!(cfg.validate().is_err());
    }
}
