use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HarnessError, TrainConfig};
use crate::io::{decode_container, encode_container, FormatError};
use crate::model::param_specs;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TSAC";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: usize,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    /// Errors unless the tensors match what `config` builds.
    pub fn check(&self) -> Result<(), HarnessError> {
        self.params
            .matches(&param_specs(&self.config.model, &self.config.flags))
            .map_err(HarnessError::Mismatch)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    key: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    step: usize,
    dtype: String,
    config: TrainConfig,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(c: &Checkpoint) -> Result<Vec<u8>, FormatError> {
    let mut payload = Vec::with_capacity(4 * c.params.parameter_count());
    let mut tensors = Vec::with_capacity(c.params.len());
    for (key, t) in c.params.iter() {
        tensors.push(TensorEntry {
            key: key.clone(),
            shape: t.shape().to_vec(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        version: 1,
        step: c.step,
        dtype: "f32".into(),
        config: c.config.clone(),
        tensors,
    };
    encode_container(CHECKPOINT_MAGIC, &header, &payload)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, FormatError> {
    let (header, payload): (CheckpointHeader, _) = decode_container(CHECKPOINT_MAGIC, bytes)?;
    if header.dtype != "f32" {
        return Err(FormatError::MalformedHeader(format!(
            "unsupported dtype {}",
            header.dtype
        )));
    }
    let needed: usize = header
        .tensors
        .iter()
        .map(|e| 4 * e.shape.iter().product::<usize>())
        .sum();
    if needed != payload.len() {
        return Err(FormatError::Shape(format!(
            "declared tensors need {needed} bytes, payload has {}",
            payload.len()
        )));
    }
    let mut map = BTreeMap::new();
    let mut pos = 0;
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let data = payload[pos..pos + 4 * n]
            .chunks(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        pos += 4 * n;
        map.insert(e.key, Tensor::new(e.shape, data).unwrap());
    }
    Ok(Checkpoint {
        config: header.config,
        step: header.step,
        params: ParamStore::from_map(map),
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<(), HarnessError> {
    fs::write(path, encode_checkpoint(c)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, HarnessError> {
    let bytes = fs::read(path).map_err(FormatError::from)?;
    let c = decode_checkpoint(&bytes)?;
    c.check()?;
    Ok(c)
}
