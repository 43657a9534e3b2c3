use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NnError, Parameterized, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Named parameter groups, ordered by name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<P: Parameterized + ?Sized>(&mut self, name: &str, net: &P) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(NnError::DuplicateName(name.to_string()));
        }
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                shape: net.shape(),
                values: net.params().to_vec(),
            },
        );
        Ok(())
    }

    /// Copy a stored group into `net`, checking shape and length.
    pub fn load_into<P: Parameterized + ?Sized>(&self, name: &str, net: &mut P) -> Result<()> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| NnError::MissingName(name.to_string()))?;
        if entry.shape != net.shape() || entry.values.len() != net.num_params() {
            return Err(NnError::ShapeMismatch {
                expected: format!("{:?} ({} values)", net.shape(), net.num_params()),
                got: format!("{:?} ({} values)", entry.shape, entry.values.len()),
            });
        }
        net.params_mut().copy_from_slice(&entry.values);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Serialized training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub networks: ParamStore,
}

impl Checkpoint {
    pub fn new(seed: u64, networks: ParamStore) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            seed,
            networks,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        if let Some((name, _)) = ckpt
            .networks
            .entries
            .iter()
            .find(|(_, e)| e.values.iter().any(|v| !v.is_finite()))
        {
            return Err(NnError::Checkpoint(format!("non-finite values in `{name}`")));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mlp, MlpConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::new(MlpConfig::new(3, &[7], 2), &mut rng);
        let mut store = ParamStore::new();
        store.insert("actor", &net).unwrap();
        assert!(matches!(store.insert("actor", &net), Err(NnError::DuplicateName(_))));
        let dir = std::env::temp_dir().join(format!("ckpt-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.json");
        Checkpoint::new(5, store).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let mut other = Mlp::zeros(MlpConfig::new(3, &[7], 2));
        back.networks.load_into("actor", &mut other).unwrap();
        assert_eq!(other.params(), net.params());
        let mut wrong = Mlp::zeros(MlpConfig::new(3, &[6], 2));
        assert!(back.networks.load_into("actor", &mut wrong).is_err());
        assert!(matches!(
            back.networks.load_into("critic", &mut other),
            Err(NnError::MissingName(_))
        ));
        std::fs::remove_dir_all(dir).ok();
    }
}
