//! Parameter checkpoints: a JSON container mapping namespaced parameter names
//! to a shape and the base64 encoding of the flat little-endian array.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Parameters, Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "negotiate-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    /// Base64 of the little-endian element bytes.
    pub data: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn new<T: Real>() -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            dtype: T::DTYPE.to_string(),
            metadata: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    /// Stores every tensor of `params` under `prefix`.
    pub fn insert<T: Real, P: Parameters<T>>(&mut self, prefix: &str, params: &P) -> Result<()> {
        if self.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "cannot store {} tensors in a {} checkpoint",
                T::DTYPE,
                self.dtype
            )));
        }
        for (name, t) in params.named(prefix) {
            let mut bytes = Vec::with_capacity(t.len() * T::BYTES);
            for v in t.data() {
                v.write_le(&mut bytes);
            }
            self.tensors.insert(
                name,
                StoredTensor {
                    shape: t.shape().to_vec(),
                    data: STANDARD.encode(bytes),
                },
            );
        }
        Ok(())
    }

    /// Overwrites `params` with the stored tensors under `prefix`.
    pub fn load_into<T: Real, P: Parameters<T>>(&self, prefix: &str, params: &mut P) -> Result<()> {
        if self.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {}, requested {}",
                self.dtype,
                T::DTYPE
            )));
        }
        let mut failure = None;
        params.visit_mut(prefix, &mut |name, t| {
            if failure.is_some() {
                return;
            }
            match self.decode::<T>(&name) {
                Ok(stored) if stored.shape() == t.shape() => *t = stored,
                Ok(stored) => {
                    failure = Some(Error::Checkpoint(format!(
                        "{name}: stored shape {:?}, expected {:?}",
                        stored.shape(),
                        t.shape()
                    )))
                }
                Err(e) => failure = Some(e),
            }
        });
        failure.map_or(Ok(()), Err)
    }

    pub fn decode<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let stored = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let bytes = STANDARD
            .decode(&stored.data)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        if bytes.len() % T::BYTES != 0 {
            return Err(Error::Checkpoint(format!("{name}: truncated data")));
        }
        let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        Tensor::from_vec(&stored.shape, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container {} v{}",
                ck.format, ck.version
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Linear, Lstm};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lstm = Lstm::<f32>::new(5, 7, &mut rng);
        let mut ck = Checkpoint::new::<f32>();
        ck.insert("agent_a/encoder_msg", &lstm).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let mut other = Lstm::<f32>::new(5, 7, &mut rng);
        back.load_into("agent_a/encoder_msg", &mut other).unwrap();
        assert_eq!(other, lstm);
        assert!(back.tensors.contains_key("agent_a/encoder_msg/w_ih"));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut ck = Checkpoint::new::<f64>();
        ck.insert("l", &Linear::<f64>::new(3, 2, &mut rng)).unwrap();
        let mut wrong = Linear::<f64>::new(4, 2, &mut rng);
        assert!(ck.load_into("l", &mut wrong).is_err());
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut ck = Checkpoint::new::<f64>();
        ck.insert("l", &Linear::<f64>::new(3, 2, &mut rng)).unwrap();
        let mut l32 = Linear::<f32>::new(3, 2, &mut rng);
        assert!(ck.load_into("l", &mut l32).is_err());
    }
}
