use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_tasks, EnvError, EnvParams, Result, TaskSpec};

pub const TASKSET_VERSION: u32 = 1;

/// A reproducible train/test split, stored as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    pub version: u32,
    pub seed: u64,
    pub params: EnvParams,
    pub train: Vec<TaskSpec>,
    pub test: Vec<TaskSpec>,
}

impl TaskSet {
    pub fn generate(params: &EnvParams, n_train: usize, n_test: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (train, test) = sample_tasks(params, n_train, n_test, &mut rng)?;
        Ok(Self {
            version: TASKSET_VERSION,
            seed,
            params: params.clone(),
            train,
            test,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| EnvError::TaskSet(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let set: TaskSet = serde_json::from_str(&text).map_err(|e| EnvError::TaskSet(e.to_string()))?;
        if set.version != TASKSET_VERSION {
            return Err(EnvError::TaskSet(format!("unsupported version {}", set.version)));
        }
        for task in set.train.iter().chain(&set.test) {
            task.validate()?;
        }
        Ok(set)
    }
}
