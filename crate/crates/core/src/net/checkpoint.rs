//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "TCNL"  u32 version  u32 header_len  header JSON {spec, meta}
//! u32 param_count
//! per param: u32 name_len, name, u32 rank, rank × u32 dims, f32 data
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetError, NetworkSpec, TcnlNetwork};
use crate::tensor::Tensor;
use crate::util::atomic_write;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TCNL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: TcnlNetwork<f32>,
    /// Free-form metadata such as the epoch or the training config.
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    meta: serde_json::Value,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("checkpoint field fits in u32").to_le_bytes());
}

pub fn encode_checkpoint(network: &TcnlNetwork<f32>, meta: &serde_json::Value) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        spec: network.spec.clone(),
        meta: meta.clone(),
    })
    .expect("header serialises");
    let mut out = Vec::with_capacity(16 + header.len() + network.params.scalar_count() * 4);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, header.len());
    out.extend_from_slice(&header);
    put_u32(&mut out, network.params.len());
    for e in &network.params.entries {
        put_u32(&mut out, e.name.len());
        out.extend_from_slice(e.name.as_bytes());
        put_u32(&mut out, e.value.shape().len());
        for &d in e.value.shape() {
            put_u32(&mut out, d);
        }
        for &v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], NetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(NetError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, NetError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, NetError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(NetError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(NetError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = r.u32("header length")? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen, "header")?)
        .map_err(|e| NetError::Checkpoint(format!("bad header: {e}")))?;
    // the architecture comes from the stored NetworkSpec; stored tensors then overwrite the fresh weights
    let mut network = TcnlNetwork::build(&header.spec, 0)?;
    let count = r.u32("parameter count")? as usize;
    if count != network.params.len() {
        return Err(NetError::Checkpoint(format!(
            "{count} parameters stored, architecture has {}",
            network.params.len()
        )));
    }
    for entry in &mut network.params.entries {
        let nlen = r.u32("parameter name")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "parameter name")?)
            .map_err(|_| NetError::Checkpoint("parameter name is not UTF-8".into()))?;
        if name != entry.name {
            return Err(NetError::Checkpoint(format!("expected parameter `{}`, found `{name}`", entry.name)));
        }
        let rank = r.u32("parameter rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("parameter dims")? as usize);
        }
        if dims != entry.value.shape() {
            return Err(NetError::Checkpoint(format!(
                "parameter `{name}` has shape {dims:?}, architecture expects {:?}",
                entry.value.shape()
            )));
        }
        let raw = r.take(entry.value.len() * 4, "parameter data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entry.value = Tensor::from_vec(&dims, data)?;
    }
    if r.pos != bytes.len() {
        return Err(NetError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        network,
        meta: header.meta,
    })
}

pub fn save_checkpoint(path: &Path, network: &TcnlNetwork<f32>, meta: &serde_json::Value) -> Result<(), NetError> {
    let bytes = encode_checkpoint(network, meta);
    atomic_write(path, |f| std::io::Write::write_all(f, &bytes)).map_err(|source| NetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NetError> {
    let bytes = std::fs::read(path).map_err(|source| NetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
