//! Single-file checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, JSON
//! header, little-endian `f32` blobs in header order, then the SHA-256 of
//! everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FFCKPT\0\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Landmark predictor and its optimizer.
    Landmark,
    /// Generator, discriminator, their optimizers, and optionally a frozen
    /// landmark predictor.
    Inpaint,
}

impl CheckpointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::Landmark => "landmark",
            CheckpointKind::Inpaint => "inpaint",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Blob {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(Self {
            shape: t.dims().to_vec(),
            data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?,
        })
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, self.shape.as_slice(), device)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub step: u64,
    pub config: TrainConfig,
    /// Named blobs; names are `<group>/<parameter>`.
    pub blobs: BTreeMap<String, Blob>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: CheckpointKind,
    step: u64,
    fingerprint: String,
    config: TrainConfig,
    entries: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, step: u64, config: TrainConfig) -> Self {
        Self {
            kind,
            step,
            config,
            blobs: BTreeMap::new(),
        }
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    /// Adds every tensor of `tensors` under `group/`.
    pub fn insert_group(&mut self, group: &str, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, t) in tensors {
            self.blobs.insert(format!("{group}/{name}"), Blob::from_tensor(t)?);
        }
        Ok(())
    }

    pub fn has_group(&self, group: &str) -> bool {
        let prefix = format!("{group}/");
        self.blobs.keys().any(|k| k.starts_with(&prefix))
    }

    /// Tensors stored under `group/`, with the prefix removed.
    pub fn group(&self, group: &str, device: &Device) -> Result<BTreeMap<String, Tensor>> {
        let prefix = format!("{group}/");
        let out: BTreeMap<_, _> = self
            .blobs
            .iter()
            .filter_map(|(k, b)| k.strip_prefix(&prefix).map(|rest| (rest.to_string(), b)))
            .map(|(k, b)| Ok((k, b.to_tensor(device)?)))
            .collect::<Result<_>>()?;
        if out.is_empty() {
            return Err(corrupt(format!("checkpoint has no '{group}' entries")));
        }
        Ok(out)
    }

    /// Fails with a typed error unless the checkpoint is of `expected` kind.
    pub fn expect_kind(&self, expected: CheckpointKind) -> Result<()> {
        if self.kind != expected {
            return Err(Error::CheckpointKind {
                found: self.kind.as_str().into(),
                expected: expected.as_str().into(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind,
            step: self.step,
            fingerprint: self.fingerprint(),
            config: self.config.clone(),
            entries: self
                .blobs
                .iter()
                .map(|(name, b)| Entry {
                    name: name.clone(),
                    shape: b.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.blobs.values().map(|b| b.data.len() * 4).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for b in self.blobs.values() {
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 + 32 {
            return Err(corrupt(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| corrupt("header length exceeds file size"))?;
        let header: Header =
            serde_json::from_slice(&body[20..header_end]).map_err(|e| corrupt(format!("bad header: {e}")))?;
        if header.fingerprint != header.config.fingerprint() {
            return Err(corrupt("config fingerprint does not match stored config"));
        }
        let mut pos = header_end;
        let mut blobs = BTreeMap::new();
        for e in header.entries {
            let n: usize = e.shape.iter().product();
            let end = pos
                .checked_add(n * 4)
                .filter(|&end| end <= body.len())
                .ok_or_else(|| corrupt(format!("blob '{}' runs past the end of the file", e.name)))?;
            let data = body[pos..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            pos = end;
            blobs.insert(e.name, Blob { shape: e.shape, data });
        }
        if pos != body.len() {
            return Err(corrupt("trailing bytes after the last blob"));
        }
        Ok(Self {
            kind: header.kind,
            step: header.step,
            config: header.config,
            blobs,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        // Write then rename so a crash never leaves a half-written checkpoint.
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
