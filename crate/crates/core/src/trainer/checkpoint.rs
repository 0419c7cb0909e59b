//! Binary checkpoint format.
//!
//! ```text
//! "CPGA" | version: u32 LE | header_len: u64 LE | header: JSON | payload
//! ```
//!
//! The header holds the model config, the prior plane order, the training
//! provenance and a directory of tensors with byte offsets into the payload.
//! The payload is the concatenation of all tensors as little-endian `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Provenance;
use crate::error::{Error, Result};
use crate::model::{CpgaConfig, CpgaNet};
use crate::priors::PRIOR_PLANES;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CPGA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: CpgaConfig,
    prior_planes: Vec<String>,
    provenance: Provenance,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: CpgaConfig,
    pub provenance: Provenance,
    /// Parameters in network registration order.
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_net(net: &CpgaNet, provenance: Provenance) -> Self {
        Self {
            config: net.config().clone(),
            provenance,
            tensors: net
                .params()
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    /// Rebuilds the network; rejects missing, extra or misshapen tensors.
    pub fn to_net(&self) -> Result<CpgaNet> {
        CpgaNet::from_named(self.config.clone(), self.tensors.clone())
    }

    /// Rebuilds the network under `expected`, which must describe the same model.
    pub fn to_net_checked(&self, expected: &CpgaConfig) -> Result<CpgaNet> {
        if !self.config.same_model(expected) {
            return Err(Error::Checkpoint(format!(
                "checkpoint config {:?} does not match requested {:?}",
                self.config, expected
            )));
        }
        CpgaNet::from_named(expected.clone(), self.tensors.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.numel() as u64;
        }
        let header = Header {
            config: self.config.clone(),
            prior_planes: PRIOR_PLANES.iter().map(|s| s.to_string()).collect(),
            provenance: self.provenance.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = 16usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| bad(format!("header: {e}")))?;
        if header.prior_planes != PRIOR_PLANES {
            return Err(bad(format!(
                "prior plane order {:?} differs from {:?}",
                header.prior_planes, PRIOR_PLANES
            )));
        }
        let payload = &bytes[payload_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0u64;
        for e in header.tensors {
            if e.offset != expected_offset {
                return Err(bad(format!("tensor {} at unexpected offset {}", e.name, e.offset)));
            }
            let numel: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * numel;
            if end > payload.len() {
                return Err(bad(format!("tensor {} runs past end of file", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&e.shape, data).map_err(|err| bad(format!("tensor {}: {err}", e.name)))?;
            expected_offset = end as u64;
            tensors.push((e.name, t));
        }
        if expected_offset as usize != payload.len() {
            return Err(bad("trailing bytes after last tensor".into()));
        }
        Ok(Self {
            config: header.config,
            provenance: header.provenance,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
