//! Binary model checkpoints. Layout is described in `docs/FORMATS.md`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_model, ForecastModel, ModelSpec};
use crate::error::{RaftError, Result};

pub const CHECKPOINT_VERSION: u8 = 1;
const MAGIC: &[u8; 8] = b"RAFTMDL\0";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    /// Always true: one set of heads is applied to every channel.
    channel_shared: bool,
    tensors: Vec<TensorInfo>,
    /// Training configuration and retrieval fingerprint echo.
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    len: usize,
}

/// A model together with free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ForecastModel,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: ForecastModel, meta: serde_json::Value) -> Self {
        Self { model, meta }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| RaftError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| RaftError::io(path, e))?;
        w.flush().map_err(|e| RaftError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| RaftError::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let params = &self.model.params;
        let names = params.tensor_names(&self.model.spec.periods);
        let tensors = params.tensors();
        let header = Header {
            spec: self.model.spec.clone(),
            channel_shared: true,
            tensors: names.into_iter().zip(&tensors).map(|(name, t)| TensorInfo { name, len: t.len() }).collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
        w.write_all(&[CHECKPOINT_VERSION])?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for t in tensors {
            for v in t {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let fmt = |e: std::io::Error| RaftError::Format(format!("truncated checkpoint: {e}"));
        let mut version = [0u8; 1];
        r.read_exact(&mut version).map_err(fmt)?;
        if version[0] != CHECKPOINT_VERSION {
            return Err(RaftError::Format(format!("unsupported checkpoint version {}", version[0])));
        }
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MAGIC {
            return Err(RaftError::Format("not a model checkpoint".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(fmt)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json).map_err(fmt)?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| RaftError::Format(format!("bad checkpoint header: {e}")))?;
        let mut model = init_model(header.spec.clone(), 0);
        let expected: Vec<TensorInfo> = model
            .params
            .tensor_names(&header.spec.periods)
            .into_iter()
            .zip(model.params.tensors())
            .map(|(name, t)| TensorInfo { name, len: t.len() })
            .collect();
        if expected != header.tensors {
            return Err(RaftError::Format("tensor table does not match the model spec".into()));
        }
        for t in model.params.tensors_mut() {
            let mut buf = vec![0u8; t.len() * 8];
            r.read_exact(&mut buf).map_err(fmt)?;
            for (v, b) in t.iter_mut().zip(buf.chunks_exact(8)) {
                *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
            }
        }
        if r.read(&mut [0u8; 1]).map_err(fmt)? != 0 {
            return Err(RaftError::Format("trailing bytes after checkpoint tensors".into()));
        }
        Ok(Self { model, meta: header.meta })
    }
}
