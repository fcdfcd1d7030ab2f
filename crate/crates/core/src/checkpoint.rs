//! Binary checkpoints: `CSTYCKPT`, a u64 LE header length, a JSON header
//! listing every entry, then the little-endian f32 payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Role};
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 8] = b"CSTYCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub path: String,
    pub shape: Shape,
    pub role: Role,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    #[serde(default)]
    pub config: Option<NetworkConfig>,
    pub entries: Vec<Entry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Option<NetworkConfig>,
    pub params: ParamStore<f32>,
}

pub fn to_bytes(params: &ParamStore<f32>, config: Option<&NetworkConfig>) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (path, p) in params.iter() {
        entries.push(Entry { path: path.to_string(), shape: p.value.shape(), role: p.role, offset });
        offset += p.value.numel();
    }
    let header = serde_json::to_vec(&Header { version: FORMAT_VERSION, config: config.cloned(), entries })?;
    let mut out = Vec::with_capacity(16 + header.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, p) in params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let fmt = |m: String| Error::Format(m);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(fmt("not a checkpoint (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if hlen > body.len() {
        return Err(fmt(format!("header of {hlen} bytes exceeds file size")));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| fmt(format!("header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(fmt(format!("unsupported version {}", header.version)));
    }
    let payload = &body[hlen..];
    let total: usize = header.entries.iter().map(|e| e.shape.numel()).sum();
    if payload.len() != 4 * total {
        return Err(fmt(format!("payload is {} bytes, header implies {}", payload.len(), 4 * total)));
    }
    let mut params = ParamStore::new();
    let mut expected_offset = 0;
    for e in &header.entries {
        if e.offset != expected_offset || !e.shape.is_valid() {
            return Err(fmt(format!("entry `{}` has an inconsistent offset or shape", e.path)));
        }
        let n = e.shape.numel();
        let data = payload[4 * e.offset..4 * (e.offset + n)]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.insert(&e.path, Tensor::new(e.shape, data)?, e.role)?;
        expected_offset += n;
    }
    Ok(Checkpoint { config: header.config, params })
}

pub fn save_checkpoint(path: &Path, params: &ParamStore<f32>, config: Option<&NetworkConfig>) -> Result<()> {
    std::fs::write(path, to_bytes(params, config)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}

impl Checkpoint {
    /// Checks every parameter of `net` against the stored entries.
    pub fn verify(&self, net: &Network) -> Result<()> {
        let specs = net.specs();
        for s in &specs {
            let t = self.params.tensor(&s.name).map_err(|_| {
                Error::Format(format!("checkpoint lacks parameter `{}`", s.name))
            })?;
            if t.shape() != s.shape {
                return Err(Error::ParamMismatch {
                    path: s.name.clone(),
                    expected: s.shape.0.to_vec(),
                    found: t.shape().0.to_vec(),
                });
            }
        }
        if self.params.len() != specs.len() {
            let known: std::collections::HashSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            let extra = self.params.names().find(|n| !known.contains(n)).unwrap_or("?");
            return Err(Error::Format(format!("checkpoint has unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    /// Rebuilds the stored network and verifies the parameters against it.
    pub fn network(&self) -> Result<Network> {
        let cfg = self
            .config
            .as_ref()
            .ok_or_else(|| Error::Format("checkpoint carries no network config".into()))?;
        let net = Network::build(cfg)?;
        self.verify(&net)?;
        Ok(net)
    }
}
