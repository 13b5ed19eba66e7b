//! Model snapshots and their on-disk format.
//!
//! Layout: magic `LMCKPT01`, u64 little-endian header length, JSON header
//! (step, model config, provenance, parameter names/kinds/shapes in storage
//! order), then every parameter's f32 values little-endian. Loading restores
//! the exact bits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::{self, Provenance};
use crate::error::{Error, Result};
use crate::model::{LanguageModel, ModelConfig};
use crate::tensor::{ParamKind, ParameterSet, Tensor};

const MAGIC: &[u8; 8] = b"LMCKPT01";

/// Parameters of a model after `step` optimizer updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub config: ModelConfig,
    pub params: ParameterSet<f32>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    step: usize,
    config: ModelConfig,
    provenance: Provenance,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn of(model: &LanguageModel, step: usize) -> Self {
        Checkpoint {
            step,
            config: model.config().clone(),
            params: model.params().clone(),
        }
    }

    pub fn model(&self) -> Result<LanguageModel> {
        LanguageModel::from_params(self.config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self, provenance: &Provenance) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.params.len());
        let mut payload = Vec::with_capacity(self.params.numel() * 4);
        for (name, kind, t) in self.params.iter() {
            entries.push(ParamEntry {
                name: name.to_string(),
                kind,
                shape: t.shape().to_vec(),
            });
            for x in t.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let header = Header {
            step: self.step,
            config: self.config.clone(),
            provenance: provenance.clone(),
            params: entries,
        };
        artifact::encode_container(MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Provenance)> {
        let (header, mut payload): (Header, _) = artifact::decode_container("checkpoint", MAGIC, bytes)?;
        let mut params = ParameterSet::new();
        for e in header.params {
            let n: usize = e.shape.iter().product();
            if payload.len() < n * 4 {
                return Err(Error::format("checkpoint", format!("payload ends inside {:?}", e.name)));
            }
            let (chunk, rest) = payload.split_at(n * 4);
            payload = rest;
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            params.insert(e.name, e.kind, Tensor::new(e.shape, data)?)?;
        }
        if !payload.is_empty() {
            return Err(Error::format("checkpoint", "trailing bytes after parameters"));
        }
        let ckpt = Checkpoint {
            step: header.step,
            config: header.config,
            params,
        };
        // Layout check: refuses files whose parameters do not fit the config.
        ckpt.model()?;
        Ok((ckpt, header.provenance))
    }

    pub fn save(&self, path: &Path, provenance: &Provenance) -> Result<()> {
        artifact::write_atomic(path, &self.to_bytes(provenance))
    }

    /// Loads a checkpoint; a missing file points at `stage`.
    pub fn load(path: &Path, stage: &'static str) -> Result<(Self, Provenance)> {
        let bytes = artifact::read_container_file(path, stage)?;
        Self::from_bytes(&bytes)
    }
}
