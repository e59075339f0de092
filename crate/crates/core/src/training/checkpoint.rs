//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `DT4RCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the JSON header, then every tensor's
//! values as little-endian `f64` in the order the header lists them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, RewardModel, SequenceModel};

pub const MAGIC: &[u8; 8] = b"DT4RCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Sequence,
    Reward,
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    /// Contrastive term as `-sum(kappa * similarity)`; zero when disabled.
    pub contrastive: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: ModelKind,
    model_config: ModelConfig,
    settings: serde_json::Value,
    vocab_hash: String,
    epoch: usize,
    loss_history: Vec<EpochRecord>,
    tags: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub model_config: ModelConfig,
    /// The training settings that produced the weights.
    pub settings: serde_json::Value,
    pub vocab_hash: String,
    pub epoch: usize,
    pub loss_history: Vec<EpochRecord>,
    pub tags: BTreeMap<String, String>,
    pub tensors: Vec<(String, Array2<f64>)>,
}

impl Checkpoint {
    pub fn capture(
        kind: ModelKind,
        model_config: ModelConfig,
        settings: serde_json::Value,
        vocab_hash: String,
        store: &ParamStore,
    ) -> Self {
        Self {
            kind,
            model_config,
            settings,
            vocab_hash,
            epoch: 0,
            loss_history: Vec::new(),
            tags: BTreeMap::new(),
            tensors: store
                .ids()
                .map(|id| (store.name(id).to_string(), store.get(id).clone()))
                .collect(),
        }
    }

    /// Copy the saved tensors into a store built with the same names.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.tensors.len() {
            return Err(Error::Compatibility(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, value) in &self.tensors {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Compatibility(format!("model has no tensor named {name}")))?;
            if store.get(id).dim() != value.dim() {
                return Err(Error::Compatibility(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    value.dim(),
                    store.get(id).dim()
                )));
            }
            store.set(id, value.clone());
        }
        Ok(())
    }

    pub fn sequence_model(&self) -> Result<(SequenceModel, ParamStore)> {
        if self.kind != ModelKind::Sequence {
            return Err(Error::Compatibility("checkpoint does not hold a sequence model".into()));
        }
        let mut store = ParamStore::new();
        let model = SequenceModel::new(self.model_config.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
        self.restore_into(&mut store)?;
        Ok((model, store))
    }

    pub fn reward_model(&self) -> Result<(RewardModel, ParamStore)> {
        if self.kind != ModelKind::Reward {
            return Err(Error::Compatibility("checkpoint does not hold a reward model".into()));
        }
        let mut store = ParamStore::new();
        let model = RewardModel::new(self.model_config.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
        self.restore_into(&mut store)?;
        Ok((model, store))
    }

    pub fn check_vocabulary(&self, vocab_hash: &str) -> Result<()> {
        if self.vocab_hash != vocab_hash {
            return Err(Error::Vocabulary(format!(
                "checkpoint vocabulary {} does not match dataset vocabulary {vocab_hash}",
                self.vocab_hash
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind,
            model_config: self.model_config.clone(),
            settings: self.settings.clone(),
            vocab_hash: self.vocab_hash.clone(),
            epoch: self.epoch,
            loss_history: self.loss_history.clone(),
            tags: self.tags.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, v)| TensorEntry {
                    name: name.clone(),
                    rows: v.nrows(),
                    cols: v.ncols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Numeric(format!("checkpoint header: {e}")))?;
        let data_len: usize = self.tensors.iter().map(|(_, v)| v.len() * 8).sum();
        let mut out = Vec::with_capacity(20 + json.len() + data_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, v) in &self.tensors {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Compatibility(format!(
                "checkpoint format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < header_len {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..header_len]).map_err(|e| bad(&format!("header: {e}")))?;
        let mut data = &body[header_len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let n = t.rows * t.cols;
            if data.len() < n * 8 {
                return Err(bad(&format!("truncated data for tensor {}", t.name)));
            }
            let values: Vec<f64> = data[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[n * 8..];
            let arr = Array2::from_shape_vec((t.rows, t.cols), values).expect("shape from header");
            tensors.push((t.name, arr));
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            kind: header.kind,
            model_config: header.model_config,
            settings: header.settings,
            vocab_hash: header.vocab_hash,
            epoch: header.epoch,
            loss_history: header.loss_history,
            tags: header.tags,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderLengths;

    fn config() -> ModelConfig {
        ModelConfig {
            dim: 4,
            heads: 2,
            layers: 1,
            ffn_dim: 8,
            buckets: 3,
            lengths: EncoderLengths::new(4, 3).unwrap(),
            max_trajectory_len: 3,
            vocab_size: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut store = ParamStore::new();
        SequenceModel::new(config(), &mut store, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut ckpt = Checkpoint::capture(
            ModelKind::Sequence,
            config(),
            serde_json::json!({"beta": 0.1 + 0.2, "epochs": 3}),
            "abc".into(),
            &store,
        );
        ckpt.epoch = 3;
        ckpt.loss_history.push(EpochRecord {
            epoch: 1,
            loss: 1.0 / 3.0,
            ce: std::f64::consts::PI,
            contrastive: -1e-300,
            grad_norm: 0.7,
        });
        ckpt.tags.insert("variant".into(), "full".into());
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        assert_eq!(loaded, ckpt);
        loaded.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

        let (_, restored) = loaded.sequence_model().unwrap();
        for id in store.ids() {
            assert_eq!(store.get(id), restored.get(id));
        }
    }

    #[test]
    fn rejects_garbage_and_mismatches() {
        let p = Path::new("x");
        assert!(matches!(Checkpoint::from_bytes(b"hello", p), Err(Error::Format { .. })));
        let mut store = ParamStore::new();
        SequenceModel::new(config(), &mut store, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let ckpt = Checkpoint::capture(ModelKind::Sequence, config(), serde_json::Value::Null, "abc".into(), &store);
        assert!(matches!(ckpt.check_vocabulary("xyz"), Err(Error::Vocabulary(_))));
        assert!(matches!(ckpt.reward_model(), Err(Error::Compatibility(_))));
        let mut bytes = ckpt.to_bytes().unwrap();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes, p), Err(Error::Compatibility(_))));
    }
}
