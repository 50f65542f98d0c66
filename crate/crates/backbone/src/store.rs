use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::BackboneError;

/// Named parameter set. Insertion order is fixed by the model builder, which
/// keeps initialisation, serialisation, and optimizer sweeps deterministic.
#[derive(Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(
            self.entries.insert(name.to_string(), t).is_none(),
            "param store: duplicate parameter {name:?}"
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Uniform Xavier/Glorot init for a weight matrix.
    pub fn insert_xavier(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::from_vec(rows, cols, data));
    }

    /// Small uniform init for embedding-like tables.
    pub fn insert_uniform(&mut self, name: &str, rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
        self.insert(name, Tensor::from_vec(rows, cols, data));
    }

    pub fn insert_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Tensor::zeros(rows, cols));
    }

    pub fn insert_filled(&mut self, name: &str, rows: usize, cols: usize, v: f64) {
        self.insert(name, Tensor::filled(rows, cols, v));
    }
}

/// Checkpoint payload: parameters plus whatever extra state the caller tracks
/// (optimizer moments, iteration counters). JSON round-trips f64 exactly, so a
/// save/load cycle is bit-identical.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub params: ParamStore,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(params: ParamStore, extra: serde_json::Value) -> Self {
        Checkpoint { version: CHECKPOINT_VERSION, params, extra }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), BackboneError> {
        let body = serde_json::to_string(self).map_err(BackboneError::CheckpointEncode)?;
        std::fs::write(path, body).map_err(|source| BackboneError::CheckpointIo {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, BackboneError> {
        let body = std::fs::read_to_string(path).map_err(|source| BackboneError::CheckpointIo {
            path: path.display().to_string(),
            source,
        })?;
        let ck: Checkpoint =
            serde_json::from_str(&body).map_err(BackboneError::CheckpointDecode)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(BackboneError::CheckpointVersion { found: ck.version, expected: CHECKPOINT_VERSION });
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        store.insert_xavier("a.w", 7, 5, &mut rng);
        store.insert("odd", Tensor::row(&[1.0 / 3.0, f64::MIN_POSITIVE, 1e300, -0.0]));
        let dir = std::env::temp_dir().join("backbone-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ck.json");
        let ck = Checkpoint::new(store.clone(), serde_json::json!({"iter": 3}));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.extra["iter"], 3);
        for (name, t) in store.iter() {
            let r = back.params.get(name).unwrap();
            assert_eq!(t.shape(), r.shape());
            for (a, b) in t.data.iter().zip(&r.data) {
                assert_eq!(a.to_bits(), b.to_bits(), "param {name} drifted");
            }
        }
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_param_panics() {
        let mut store = ParamStore::new();
        store.insert_zeros("w", 1, 1);
        store.insert_zeros("w", 1, 1);
    }
}
