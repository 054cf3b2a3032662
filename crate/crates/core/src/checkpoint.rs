//! Self-describing binary checkpoints.
//!
//! Layout: the 5-byte magic `GRNU1`, a little-endian `u64` metadata length,
//! the metadata as JSON, then every parameter tensor as little-endian `f64`
//! in the order the metadata lists them.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Model, ModelConfig, ParamStore};
use crate::scene::ConceptVocab;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 5] = b"GRNU1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: ConceptVocab,
    pub train_config: Option<TrainConfig>,
    pub step: u64,
    pub metrics: BTreeMap<String, f64>,
    /// Whether labeled data was seen; decides how one output is picked per click.
    pub labeled: bool,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model_config: ModelConfig,
    vocab: ConceptVocab,
    train_config: Option<TrainConfig>,
    step: u64,
    metrics: BTreeMap<String, f64>,
    labeled: bool,
    tensors: Vec<TensorMeta>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Data(format!("checkpoint: {}", msg.into()))
}

impl Checkpoint {
    pub fn new(model: Model, vocab: ConceptVocab) -> Self {
        Self {
            model,
            vocab,
            train_config: None,
            step: 0,
            metrics: BTreeMap::new(),
            labeled: false,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let params = self.model.params();
        let meta = Meta {
            model_config: *self.model.config(),
            vocab: self.vocab.clone(),
            train_config: self.train_config.clone(),
            step: self.step,
            metrics: self
                .metrics
                .iter()
                .filter(|(_, v)| v.is_finite())
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
            labeled: self.labeled,
            tensors: params
                .iter()
                .map(|(name, v)| TensorMeta {
                    name: name.to_string(),
                    rows: v.nrows(),
                    cols: v.ncols(),
                })
                .collect(),
        };
        let meta = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(13 + meta.len() + params.num_scalars() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for (_, v) in params.iter() {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 13 || &bytes[..5] != MAGIC {
            return Err(corrupt("missing GRNU1 header"));
        }
        let meta_len = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
        let meta_end = 13usize
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("truncated metadata"))?;
        let meta: Meta = serde_json::from_slice(&bytes[13..meta_end]).map_err(|e| corrupt(e.to_string()))?;
        let mut at = meta_end;
        let mut entries = Vec::with_capacity(meta.tensors.len());
        for t in &meta.tensors {
            let n = t.rows.checked_mul(t.cols).ok_or_else(|| corrupt("tensor size overflow"))?;
            let end = n
                .checked_mul(8)
                .and_then(|b| at.checked_add(b))
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| corrupt(format!("truncated tensor {}", t.name)))?;
            let data: Vec<f64> = bytes[at..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.push((
                t.name.clone(),
                Array2::from_shape_vec((t.rows, t.cols), data).expect("length checked"),
            ));
            at = end;
        }
        if at != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - at)));
        }
        meta.vocab.validate()?;
        let model = Model::from_params(meta.model_config, ParamStore::new(entries))?;
        Ok(Self {
            model,
            vocab: meta.vocab,
            train_config: meta.train_config,
            step: meta.step,
            metrics: meta.metrics,
            labeled: meta.labeled,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
