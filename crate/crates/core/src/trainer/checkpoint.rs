//! Binary checkpoint files.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, the tensors as little-endian `f32` (parameters, then batch-norm
//! buffers, then optimizer velocity, each in header order), and a trailing
//! SHA-256 of everything before it.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use crate::error::{BmlError, Result};
use crate::model::{BmlNetwork, NamedTensor, ParamStore};

const MAGIC: &[u8; 8] = b"BMLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
    pub num_classes: usize,
    pub config: TrainConfig,
    pub params: ParamStore,
    pub buffers: ParamStore,
    pub velocity: Vec<Vec<f32>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    epoch: usize,
    global_step: u64,
    best_val: Option<f64>,
    best_epoch: Option<usize>,
    num_classes: usize,
    config: TrainConfig,
    config_hash: String,
    params: Vec<(String, Vec<usize>)>,
    buffers: Vec<(String, Vec<usize>)>,
    has_velocity: bool,
}

fn layout(store: &ParamStore) -> Vec<(String, Vec<usize>)> {
    store.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect()
}

fn corrupt(msg: impl Into<String>) -> BmlError {
    BmlError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            global_step: self.global_step,
            best_val: self.best_val,
            best_epoch: self.best_epoch,
            num_classes: self.num_classes,
            config: self.config.clone(),
            config_hash: self.config.hash(),
            params: layout(&self.params),
            buffers: layout(&self.buffers),
            has_velocity: !self.velocity.is_empty(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        let tensors = self.params.tensors.iter().chain(&self.buffers.tensors).map(|t| &t.data);
        for data in tensors.chain(&self.velocity) {
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("format version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let rest = body.get(20..).ok_or_else(|| corrupt("truncated"))?;
        if header_len > rest.len() {
            return Err(corrupt("truncated header"));
        }
        let header: Header = serde_json::from_slice(&rest[..header_len])?;
        let mut floats = rest[header_len..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let mut take = |n: usize| -> Result<Vec<f32>> {
            let v: Vec<f32> = floats.by_ref().take(n).collect();
            if v.len() != n {
                return Err(corrupt("truncated tensor data"));
            }
            Ok(v)
        };
        let mut read_store = |spec: &[(String, Vec<usize>)]| -> Result<ParamStore> {
            let tensors = spec
                .iter()
                .map(|(name, shape)| {
                    Ok(NamedTensor {
                        name: name.clone(),
                        shape: shape.clone(),
                        data: take(shape.iter().product())?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ParamStore { tensors })
        };
        let params = read_store(&header.params)?;
        let buffers = read_store(&header.buffers)?;
        let velocity = if header.has_velocity {
            params.tensors.iter().map(|t| take(t.data.len())).collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        if floats.next().is_some() {
            return Err(corrupt("trailing data"));
        }
        if header.config.hash() != header.config_hash {
            return Err(corrupt("config hash does not match stored config"));
        }
        Ok(Self {
            epoch: header.epoch,
            global_step: header.global_step,
            best_val: header.best_val,
            best_epoch: header.best_epoch,
            num_classes: header.num_classes,
            config: header.config,
            params,
            buffers,
            velocity,
        })
    }

    /// Writes to a temporary file and renames, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            BmlError::Checkpoint(m) => BmlError::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Rebuilds the network with the stored weights and statistics.
    pub fn network(&self) -> Result<BmlNetwork> {
        let mut net = BmlNetwork::new(self.config.model.clone(), self.num_classes, self.config.seed)?;
        if !net.params().same_layout(&self.params) || !net.buffers().same_layout(&self.buffers) {
            return Err(corrupt("stored tensors do not match the configured architecture"));
        }
        *net.params_mut() = self.params.clone();
        *net.buffers_mut() = self.buffers.clone();
        Ok(net)
    }
}
