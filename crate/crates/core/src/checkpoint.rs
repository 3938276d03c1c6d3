//! Versioned checkpoint container: config, normalization statistics,
//! parameter blobs named by layer, optimizer state and train-time metrics.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use diffcore::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::Error;

pub const CHECKPOINT_VERSION: u32 = 1;

/// A tensor as shape plus base64 of its little-endian f64 bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

impl Blob {
    pub fn from_tensor(name: &str, t: &Tensor) -> Self {
        let bytes: Vec<u8> = t.data().iter().flat_map(|x| x.to_le_bytes()).collect();
        Blob {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor, Error> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Schema(format!("params.{}: {e}", self.name)))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Schema(format!("params.{}: truncated blob", self.name)));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(self.shape.clone(), data).map_err(|e| Error::Schema(format!("params.{}: {e}", self.name)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: usize,
    pub m: Vec<Blob>,
    pub v: Vec<Blob>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    /// `"vae"` or `"ldm"`.
    pub kind: String,
    pub config: Value,
    /// Dataset normalization statistics and any other fitted constants.
    pub stats: Value,
    pub params: Vec<Blob>,
    pub optimizer: Option<OptimizerState>,
    pub metrics: Value,
}

impl Checkpoint {
    pub fn new(kind: &str, config: Value, stats: Value, store: &ParamStore) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            kind: kind.to_string(),
            config,
            stats,
            params: blobs(store.names(), store.tensors()),
            optimizer: None,
            metrics: Value::Object(Default::default()),
        }
    }

    pub fn with_optimizer(mut self, store: &ParamStore, opt: &Adam) -> Self {
        self.optimizer = Some(OptimizerState {
            config: opt.config.clone(),
            step: opt.step,
            m: blobs(store.names(), &opt.m),
            v: blobs(store.names(), &opt.v),
        });
        self
    }

    pub fn load_params(&self, store: &mut ParamStore) -> Result<(), Error> {
        store.load(named(&self.params)?)
    }

    /// Restore optimizer state for `store` (which must already hold the
    /// checkpoint parameters).
    pub fn restore_optimizer(&self, store: &ParamStore) -> Result<Option<Adam>, Error> {
        let Some(o) = &self.optimizer else { return Ok(None) };
        let mut m = store.clone();
        m.load(named(&o.m)?)?;
        let mut v = store.clone();
        v.load(named(&o.v)?)?;
        Ok(Some(Adam {
            config: o.config.clone(),
            step: o.step,
            m: m.tensors().to_vec(),
            v: v.tensors().to_vec(),
        }))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), Error> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "version: unsupported checkpoint version {}",
                self.version
            )));
        }
        if self.kind != kind {
            return Err(Error::Schema(format!(
                "kind: expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_string(self)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path)?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let p = e.path().to_string();
            Error::Schema(format!("{p}: {}", e.into_inner()))
        })
    }
}

fn blobs(names: &[String], tensors: &[Tensor]) -> Vec<Blob> {
    names
        .iter()
        .zip(tensors)
        .map(|(n, t)| Blob::from_tensor(n, t))
        .collect()
}

fn named(blobs: &[Blob]) -> Result<Vec<(String, Tensor)>, Error> {
    blobs.iter().map(|b| Ok((b.name.clone(), b.to_tensor()?))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        crate::nn::Linear::new(&mut store, "a", 5, 7, &mut rng);
        store.get_mut(crate::nn::ParamId(1)).data_mut()[2] = f64::MIN_POSITIVE / 3.0;
        let mut opt = Adam::new(AdamConfig::default(), &store);
        opt.step = 17;
        opt.m[0].data_mut()[3] = -1.0 / 3.0;
        let ck = Checkpoint::new("vae", serde_json::json!({"a": 1}), Value::Null, &store).with_optimizer(&store, &opt);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ck, back);
        let mut restored = store.clone();
        for t in restored.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        back.load_params(&mut restored).unwrap();
        assert_eq!(restored, store);
        assert_eq!(back.restore_optimizer(&store).unwrap().unwrap(), opt);
        assert!(back.expect_kind("ldm").is_err());
    }
}
