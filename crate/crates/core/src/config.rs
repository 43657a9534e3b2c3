//! Experiment configuration: one flat YAML mapping holding the training
//! hyperparameters next to the environment, task counts, seeds and output
//! directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_yaml::{Mapping, Value};
use thiserror::Error;

use crate::envs::{EnvParams, TaskSet};
use crate::meta::{MetaConfig, MetaError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config field `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

const OUTER_KEYS: [&str; 5] = ["env", "train_tasks", "test_tasks", "seeds", "output_dir"];

fn default_train_tasks() -> usize {
    10
}
fn default_test_tasks() -> usize {
    4
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Outer {
    #[serde(default)]
    env: EnvParams,
    #[serde(default = "default_train_tasks")]
    train_tasks: usize,
    #[serde(default = "default_test_tasks")]
    test_tasks: usize,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    output_dir: PathBuf,
}

/// Full experiment description. Every field has a default, so an empty file
/// is a valid config.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub meta: MetaConfig,
    pub env: EnvParams,
    pub train_tasks: usize,
    pub test_tasks: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_yaml_str("").expect("defaults are valid")
    }
}

fn parse_part<T: serde::de::DeserializeOwned>(map: Mapping) -> Result<T> {
    serde_path_to_error::deserialize(Value::Mapping(map)).map_err(|e| ConfigError::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

impl ExperimentConfig {
    pub fn from_yaml_str(text: &str) -> Result<Self> {
        let value: Value = serde_yaml::from_str(text).map_err(|e| ConfigError::Parse {
            path: ".".into(),
            message: e.to_string(),
        })?;
        let map = match value {
            Value::Null => Mapping::new(),
            Value::Mapping(m) => m,
            _ => {
                return Err(ConfigError::Parse {
                    path: ".".into(),
                    message: "top level must be a mapping".into(),
                })
            }
        };
        let (mut outer, mut meta) = (Mapping::new(), Mapping::new());
        for (k, v) in map {
            let is_outer = k.as_str().is_some_and(|s| OUTER_KEYS.contains(&s));
            if is_outer {
                outer.insert(k, v);
            } else {
                meta.insert(k, v);
            }
        }
        let outer: Outer = parse_part(outer)?;
        let meta: MetaConfig = parse_part(meta)?;
        let cfg = Self {
            meta,
            env: outer.env,
            train_tasks: outer.train_tasks,
            test_tasks: outer.test_tasks,
            seeds: outer.seeds,
            output_dir: outer.output_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_yaml_str(&text)
    }

    /// Effective configuration as YAML; parses back to an identical value.
    pub fn to_yaml(&self) -> String {
        let outer = Outer {
            env: self.env.clone(),
            train_tasks: self.train_tasks,
            test_tasks: self.test_tasks,
            seeds: self.seeds.clone(),
            output_dir: self.output_dir.clone(),
        };
        let mut map = match serde_yaml::to_value(&self.meta).expect("serializable") {
            Value::Mapping(m) => m,
            _ => unreachable!("struct serializes to a mapping"),
        };
        if let Value::Mapping(m) = serde_yaml::to_value(&outer).expect("serializable") {
            map.extend(m);
        }
        serde_yaml::to_string(&map).expect("serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate().map_err(|e| match e {
            MetaError::InvalidConfig { field, message } => ConfigError::Invalid {
                field: field.to_string(),
                message,
            },
            other => ConfigError::Invalid {
                field: "config".into(),
                message: other.to_string(),
            },
        })?;
        self.env.validate().map_err(|e| ConfigError::Invalid {
            field: "env".into(),
            message: e.to_string(),
        })?;
        if self.train_tasks < 1 {
            return Err(ConfigError::Invalid {
                field: "train_tasks".into(),
                message: "must be >= 1".into(),
            });
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid {
                field: "seeds".into(),
                message: "at least one seed is required".into(),
            });
        }
        Ok(())
    }

    /// Train and test tasks for one seed.
    pub fn task_set(&self, seed: u64) -> std::result::Result<TaskSet, crate::envs::EnvError> {
        TaskSet::generate(&self.env, self.train_tasks, self.test_tasks, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{Family, LatentSpec};
    use crate::meta::Mode;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_yaml_str("").unwrap();
        assert_eq!(c.meta.global, LatentSpec::repeated(Family::Dirichlet, 3, 2));
        assert_eq!(c.meta.local, LatentSpec::repeated(Family::Categorical, 3, 2));
        assert_eq!(c.meta.global.total_dim() + c.meta.local.total_dim(), 12);
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn errors_name_the_field() {
        let e = ExperimentConfig::from_yaml_str("beta: -1").unwrap_err().to_string();
        assert!(e.contains("beta"), "{e}");
        let e = ExperimentConfig::from_yaml_str("betta: 1").unwrap_err().to_string();
        assert!(e.contains("betta"), "{e}");
        let e = ExperimentConfig::from_yaml_str("env: {horizon: nope}")
            .unwrap_err()
            .to_string();
        assert!(e.contains("env.horizon"), "{e}");
        let e = ExperimentConfig::from_yaml_str("sac: {gamma: 2}")
            .unwrap_err()
            .to_string();
        assert!(e.contains("gamma"), "{e}");
        assert!(ExperimentConfig::from_yaml_str("[1, 2]").is_err());
    }

    #[test]
    fn shorthand_blocks_and_round_trip() {
        let text = "mode: pearl\nglobal: [\"gaussian:4\", {family: dirichlet, dim: 2}]\nlocal: []\nenv: {family: point_robot, horizon: 30}\nseeds: [1, 2]\n";
        let c = ExperimentConfig::from_yaml_str(text).unwrap();
        assert_eq!(c.meta.mode, Mode::Pearl);
        assert_eq!(c.meta.global.blocks[0].dim, 4);
        assert_eq!(c.meta.global.blocks[1].family, Family::Dirichlet);
        assert!(c.meta.local.blocks.is_empty());
        let again = ExperimentConfig::from_yaml_str(&c.to_yaml()).unwrap();
        assert_eq!(again, c);
    }
}
