//! Checkpoint container: magic, a JSON manifest, then one embedding-file blob
//! per parameter and per frozen text matrix.
//!
//! ```text
//! "ASUCKPT1" | u32 manifest length | manifest JSON | blob 0 | blob 1 | ...
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AsuError, Result};
use crate::tensor::{ParamStore, Tensor};
use crate::text_embed::EmbeddingMatrix;

pub const MAGIC: &[u8; 8] = b"ASUCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    config: serde_json::Value,
    entries: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    kind: Kind,
    shape: Vec<usize>,
    bytes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Param,
    Frozen,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// The run configuration the weights belong to.
    pub config: serde_json::Value,
    pub params: ParamStore,
    /// Frozen text matrices by role (for example `"units"`, `"labels"`).
    pub frozen: Vec<(String, EmbeddingMatrix)>,
}

impl Checkpoint {
    pub fn frozen(&self, role: &str) -> Option<&EmbeddingMatrix> {
        self.frozen.iter().find(|(r, _)| r == role).map(|(_, m)| m)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut blobs = Vec::new();
        for p in self.params.iter() {
            let shape = p.tensor.shape().to_vec();
            let cols = shape.last().copied().unwrap_or(1).max(1);
            let rows = p.tensor.numel() / cols;
            let names = (0..rows).map(|i| format!("{}[{i}]", p.name)).collect();
            let m = EmbeddingMatrix::new(names, Tensor::new(&[rows, cols], p.tensor.data().to_vec())?)?;
            let blob = m.to_bytes()?;
            entries.push(Entry {
                name: p.name.clone(),
                kind: Kind::Param,
                shape,
                bytes: blob.len(),
            });
            blobs.push(blob);
        }
        for (role, m) in &self.frozen {
            let blob = m.to_bytes()?;
            entries.push(Entry {
                name: role.clone(),
                kind: Kind::Frozen,
                shape: vec![m.rows(), m.dim()],
                bytes: blob.len(),
            });
            blobs.push(blob);
        }
        let manifest = serde_json::to_vec(&Manifest {
            version: 1,
            config: self.config.clone(),
            entries,
        })?;
        let len = u32::try_from(manifest.len()).map_err(|_| AsuError::Invalid("manifest too large".into()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&manifest);
        for b in blobs {
            out.extend(b);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| AsuError::Invalid(format!("checkpoint: {msg}"));
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic or truncated header".into()));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = 12 + len;
        if bytes.len() < body {
            return Err(bad(format!("manifest needs {len} bytes")));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[12..body])?;
        if manifest.version != 1 {
            return Err(bad(format!("unsupported version {}", manifest.version)));
        }
        let mut params = ParamStore::new();
        let mut frozen = Vec::new();
        let mut at = body;
        for e in manifest.entries {
            let end = at
                .checked_add(e.bytes)
                .filter(|&end| end <= bytes.len())
                .ok_or_else(|| bad(format!("blob for {} is truncated", e.name)))?;
            let m = EmbeddingMatrix::from_bytes(&bytes[at..end])?;
            at = end;
            match e.kind {
                Kind::Param => {
                    let t = Tensor::new(&e.shape, m.tensor().data().to_vec())?;
                    params.insert(e.name, t)?;
                }
                Kind::Frozen => frozen.push((e.name, m)),
            }
        }
        if at != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - at)));
        }
        Ok(Checkpoint {
            config: manifest.config,
            params,
            frozen,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| AsuError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| AsuError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
