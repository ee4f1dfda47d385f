//! Portable parameter container.
//!
//! Layout: an 8-byte little-endian manifest length, the JSON manifest, then
//! every tensor as little-endian f32 in manifest order. The manifest carries
//! a SHA-256 of the payload.

use std::io::{Read, Write};
use std::path::Path;

use conkd_nn::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Vocabulary;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vocabulary>,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub vocab: Option<Vocabulary>,
    pub params: ParamStore<f32>,
}

fn payload(params: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.num_values() * 4);
    for (_, _, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let body = payload(&self.params);
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            seed: self.seed,
            vocab: self.vocab.clone(),
            tensors: self
                .params
                .iter()
                .map(|(_, name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    dtype: "f32".into(),
                })
                .collect(),
            payload_sha256: hex(&Sha256::digest(&body)),
        };
        let m = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(8 + m.len() + body.len());
        out.extend_from_slice(&(m.len() as u64).to_le_bytes());
        out.extend_from_slice(&m);
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 8 {
            return Err(bad("file shorter than its header"));
        }
        let mlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let mend = 8usize.checked_add(mlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("manifest length exceeds file"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[8..mend])?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", manifest.format_version)));
        }
        let body = &bytes[mend..];
        let expected: usize = manifest.tensors.iter().map(|t| 4 * t.shape.iter().product::<usize>()).sum();
        if body.len() != expected {
            return Err(Error::Checkpoint(format!("payload is {} bytes, manifest describes {expected}", body.len())));
        }
        if hex(&Sha256::digest(body)) != manifest.payload_sha256 {
            return Err(bad("payload checksum mismatch"));
        }
        let mut params = ParamStore::new();
        let mut off = 0;
        for t in &manifest.tensors {
            if t.dtype != "f32" {
                return Err(Error::Checkpoint(format!("unsupported dtype {}", t.dtype)));
            }
            let n: usize = t.shape.iter().product();
            let data = body[off..off + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += 4 * n;
            params.add(t.name.clone(), Tensor::new(t.shape.clone(), data)?)?;
        }
        Ok(Checkpoint {
            kind: manifest.kind,
            config: manifest.config,
            seed: manifest.seed,
            vocab: manifest.vocab,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn config_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    /// Copies every stored tensor into `target` by name. Both sides must hold
    /// exactly the same names and shapes.
    pub fn restore_into(&self, target: &mut ParamStore<f32>) -> Result<()> {
        if target.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                target.len()
            )));
        }
        for (_, name, t) in self.params.iter() {
            let id = target
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            if target.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: stored shape {:?}, model shape {:?}",
                    t.shape(),
                    target.get(id).shape()
                )));
            }
            target.assign(id, t.clone())?;
        }
        Ok(())
    }
}
