//! Versioned binary checkpoint container.
//!
//! ```text
//! magic "CMOTACKP" | version u32 | meta length u64 | meta (JSON)
//! tensor count u32
//! per tensor: name length u32 | name | dtype u8 | ndim u32 | dims u64* | payload
//! ```
//!
//! All integers and payloads are little-endian. Tensors are the model
//! parameters (`param/NAME`) and both Adam moments (`adam_m/NAME`,
//! `adam_v/NAME`). Every random stream in training is derived from the seed
//! and the loop counters, so the counters are the whole RNG state.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::fsio::atomic_write;
use crate::model::{Model, ModelError};
use crate::numerics::Tensor;
use crate::scalar::{DType, Scalar};
use crate::tokenizer::{Codebook, Vocab};
use crate::trainer::{AdamState, TrainError, Trainer};

pub const MAGIC: &[u8; 8] = b"CMOTACKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint holds {found:?} tensors, expected {expected:?}")]
    DType { found: DType, expected: DType },
    #[error("checkpoint lacks tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name} has shape {found:?}, model expects {expected:?}")]
    Shape { name: String, found: Vec<usize>, expected: Vec<usize> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Everything in the checkpoint besides the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub config_hash: String,
    pub vocab: Vocab,
    pub codebook: Codebook,
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub global_step: u64,
    pub order: Vec<usize>,
    pub pseudo: Option<Vec<Vec<Vec<usize>>>>,
    pub offline: Option<Vec<Vec<Vec<usize>>>>,
    pub pseudo_generated: usize,
    pub adam_step: u64,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub meta: CheckpointMeta,
    pub trainer: Trainer<T>,
}

fn dtype_from_tag(tag: u8) -> Option<DType> {
    match tag {
        0 => Some(DType::F32),
        1 => Some(DType::F64),
        _ => None,
    }
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Serializes a trainer with its run config, vocabulary and codebook.
pub fn encode<T: Scalar>(config: &RunConfig, vocab: &Vocab, codebook: &Codebook, trainer: &Trainer<T>) -> Result<Vec<u8>, CheckpointError> {
    let meta = CheckpointMeta {
        config: config.clone(),
        config_hash: config.hash(),
        vocab: vocab.clone(),
        codebook: codebook.clone(),
        epoch: trainer.epoch,
        step_in_epoch: trainer.step_in_epoch,
        global_step: trainer.global_step,
        order: trainer.order.clone(),
        pseudo: trainer.pseudo.clone(),
        offline: trainer.offline.clone(),
        pseudo_generated: trainer.pseudo_generated,
        adam_step: trainer.adam.step,
    };
    let blob = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(&blob);
    let params = &trainer.model.params;
    out.extend_from_slice(&(3 * params.len() as u32).to_le_bytes());
    for (i, (_, name, t)) in params.iter().enumerate() {
        put_tensor(&mut out, &format!("param/{name}"), t);
        put_tensor(&mut out, &format!("adam_m/{name}"), &trainer.adam.m[i]);
        put_tensor(&mut out, &format!("adam_v/{name}"), &trainer.adam.v[i]);
    }
    Ok(out)
}

pub fn save<T: Scalar>(path: &Path, config: &RunConfig, vocab: &Vocab, codebook: &Codebook, trainer: &Trainer<T>) -> Result<(), CheckpointError> {
    Ok(atomic_write(path, &encode(config, vocab, codebook, trainer)?)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads only the header and metadata.
pub fn decode_meta(bytes: &[u8]) -> Result<CheckpointMeta, CheckpointError> {
    Ok(read_header(&mut Reader { bytes, pos: 0 })?)
}

fn read_header(r: &mut Reader<'_>) -> Result<CheckpointMeta, CheckpointError> {
    if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = r.u64()? as usize;
    Ok(serde_json::from_slice(r.take(len)?)?)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let meta = read_header(&mut r)?;
    let count = r.u32()? as usize;
    let mut tensors = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
        let found = dtype_from_tag(r.take(1)?[0]).ok_or(CheckpointError::Truncated)?;
        if found != T::DTYPE {
            return Err(CheckpointError::DType { found, expected: T::DTYPE });
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let width = match found {
            DType::F32 => 4,
            DType::F64 => 8,
        };
        let payload = r.take(n.checked_mul(width).ok_or(CheckpointError::Truncated)?)?;
        let data = payload.chunks_exact(width).map(T::read_le).collect();
        let t = Tensor::new(shape, data).map_err(|_| CheckpointError::Truncated)?;
        tensors.insert(name, t);
    }

    let mut model = Model::<T>::new(meta.config.model.clone(), 0)?;
    let mut adam = AdamState::new(&model.params);
    let ids: Vec<_> = model.params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let name = model.params.name(id).to_string();
        let expected = model.params.get(id).shape().to_vec();
        let mut fetch = |prefix: &str| -> Result<Tensor<T>, CheckpointError> {
            let key = format!("{prefix}/{name}");
            let t = tensors.remove(&key).ok_or_else(|| CheckpointError::MissingTensor(key.clone()))?;
            if t.shape() != expected {
                return Err(CheckpointError::Shape { name: key, found: t.shape().to_vec(), expected: expected.clone() });
            }
            Ok(t)
        };
        *model.params.get_mut(id) = fetch("param")?;
        adam.m[i] = fetch("adam_m")?;
        adam.v[i] = fetch("adam_v")?;
    }
    adam.step = meta.adam_step;
    let mut trainer = Trainer::new(model, meta.config.resolved_train())?;
    trainer.adam = adam;
    trainer.epoch = meta.epoch;
    trainer.step_in_epoch = meta.step_in_epoch;
    trainer.global_step = meta.global_step;
    trainer.order = meta.order.clone();
    trainer.pseudo = meta.pseudo.clone();
    trainer.offline = meta.offline.clone();
    trainer.pseudo_generated = meta.pseudo_generated;
    Ok(Checkpoint { meta, trainer })
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>, CheckpointError> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::build_vocab;

    fn setup() -> (RunConfig, Vocab, Codebook, Trainer<f64>) {
        let mut cfg = RunConfig::desk();
        cfg.model.layers = 1;
        cfg.model.d_model = 8;
        cfg.model.heads = 2;
        let vocab = build_vocab(&["a b c"]).unwrap();
        let codebook = Codebook { patch: 8, channels: 3, width: 32, height: 32, entries: vec![vec![0.0; 192]; 64] };
        let model = Model::new(cfg.model.clone(), 3).unwrap();
        let trainer = Trainer::new(model, cfg.resolved_train()).unwrap();
        (cfg, vocab, codebook, trainer)
    }

    #[test]
    fn roundtrip_is_exact() {
        let (cfg, vocab, codebook, mut trainer) = setup();
        trainer.adam.step = 7;
        trainer.adam.m[0].data_mut()[0] = 0.125;
        trainer.epoch = 2;
        trainer.order = vec![3, 1, 2];
        let bytes = encode(&cfg, &vocab, &codebook, &trainer).unwrap();
        let ck = decode::<f64>(&bytes).unwrap();
        assert_eq!(ck.meta.config_hash, cfg.hash());
        assert_eq!(ck.trainer.adam, trainer.adam);
        assert_eq!(ck.trainer.order, trainer.order);
        assert_eq!(encode(&cfg, &vocab, &codebook, &ck.trainer).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let (cfg, vocab, codebook, trainer) = setup();
        let bytes = encode(&cfg, &vocab, &codebook, &trainer).unwrap();
        assert!(matches!(decode::<f64>(b"nonsense"), Err(CheckpointError::BadMagic)));
        assert!(matches!(decode::<f64>(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated)));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(decode::<f64>(&v2), Err(CheckpointError::Version(2))));
        assert!(matches!(decode::<f32>(&bytes), Err(CheckpointError::DType { .. })));
    }
}
