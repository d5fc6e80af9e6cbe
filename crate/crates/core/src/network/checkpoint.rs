//! Checkpoint container.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "CADDMCKP"
//! 8       4     format version, u32 little-endian (1)
//! 12      4     header length H, u32 little-endian
//! 16      H     UTF-8 JSON header (CheckpointHeader)
//! 16+H    ...   parameters as little-endian f32, tensors back to back in
//!               header order; `offset` and `len` count f32 elements
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{InputStats, Model, NetworkConfig};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CADDMCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub network: NetworkConfig,
    pub stats: InputStats,
    pub seed: u64,
    /// Free-form provenance (training mode, epoch, ...).
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub data: Vec<f32>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, seed: u64, meta: serde_json::Map<String, serde_json::Value>) -> Self {
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        for (name, shape, values) in model.named_params() {
            tensors.push(TensorEntry {
                name,
                shape,
                offset: data.len(),
                len: values.len(),
            });
            data.extend(values.iter().map(|v| *v as f32));
        }
        Self {
            header: CheckpointHeader {
                network: model.config.clone(),
                stats: model.stats,
                seed,
                meta,
                tensors,
            },
            data,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let raw = &bytes[16 + hlen..];
        if !raw.len().is_multiple_of(4) {
            return Err(bad("parameter block is not a whole number of f32 values"));
        }
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        for t in &header.tensors {
            if t.offset + t.len > data.len() || t.shape.iter().product::<usize>() != t.len {
                return Err(bad(&format!("tensor {} is inconsistent with the data block", t.name)));
            }
        }
        Ok(Self { header, data })
    }

    /// Rebuilds the model described by the header.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::zeros(self.header.network.clone())?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Copies weights into `model`, failing with a per-tensor shape diff
    /// when the architectures disagree.
    pub fn load_into(&self, model: &mut Model) -> Result<()> {
        let mut diffs = Vec::new();
        {
            let params = model.params_mut();
            let expected: Vec<(&str, &[usize])> =
                params.iter().map(|p| (p.name.as_str(), p.shape.as_slice())).collect();
            let stored: Vec<(&str, &[usize])> = self
                .header
                .tensors
                .iter()
                .map(|t| (t.name.as_str(), t.shape.as_slice()))
                .collect();
            for (name, shape) in &expected {
                match stored.iter().find(|(n, _)| n == name) {
                    None => diffs.push(format!("{name}: missing from checkpoint (model {shape:?})")),
                    Some((_, s)) if s != shape => diffs.push(format!("{name}: checkpoint {s:?} vs model {shape:?}")),
                    _ => {}
                }
            }
            for (name, shape) in &stored {
                if !expected.iter().any(|(n, _)| n == name) {
                    diffs.push(format!("{name}: not in model (checkpoint {shape:?})"));
                }
            }
        }
        if !diffs.is_empty() {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch:\n  {}",
                diffs.join("\n  ")
            )));
        }
        for p in model.params_mut() {
            let t = self
                .header
                .tensors
                .iter()
                .find(|t| t.name == p.name)
                .expect("checked above");
            for (dst, src) in p.value.iter_mut().zip(&self.data[t.offset..t.offset + t.len]) {
                *dst = f64::from(*src);
            }
        }
        model.stats = self.header.stats;
        Ok(())
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
