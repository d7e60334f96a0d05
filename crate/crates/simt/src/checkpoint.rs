//! Binary checkpoint format.
//!
//! ```text
//! "STRF1" | u32 version | u32 header_len | JSON header
//! u32 n_tensors
//! per tensor: u16 name_len | name | u8 ndim | u32 dims[ndim] | f64 data[] | u32 crc32
//! u32 crc32 of every preceding byte
//! ```
//!
//! Integers and floats are little-endian; the per-tensor checksum covers the
//! tensor's name, shape and data bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use simt_core::model::{Checkpoint, ModelConfig, Stage};
use simt_core::nn::{Parameters, Tensor};
use simt_core::tailor::TailorConfig;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"STRF1";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    tailor: Option<TailorConfig>,
    stage: Stage,
    k: Option<usize>,
    seed: u64,
}

/// Serializes a checkpoint to bytes.
pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        config: ck.config.clone(),
        tailor: ck.tailor,
        stage: ck.stage,
        k: ck.k,
        seed: ck.seed,
    })
    .expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(64 + header.len() + 8 * ck.params.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(ck.params.len() as u32).to_le_bytes());
    for t in ck.params.tensors() {
        let start = out.len();
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(2);
        out.extend_from_slice(&(t.rows as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols as u32).to_le_bytes());
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    crate::files::write_bytes(path, &encode(ck))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes, path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Parses checkpoint bytes; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let checksum = |detail: &str| Error::Checksum {
        path: path.to_path_buf(),
        detail: detail.to_owned(),
    };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let version = r.u32().ok_or_else(|| checksum("file truncated"))?;
    if version != VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            version,
        });
    }
    if bytes.len() < r.pos + 4 {
        return Err(checksum("file truncated"));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(checksum("file checksum mismatch (truncated or corrupted)"));
    }
    let mut r = Reader {
        bytes: body,
        pos: r.pos,
    };
    let header_len = r.u32().ok_or_else(|| checksum("header truncated"))? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len).ok_or_else(|| checksum("header truncated"))?)
        .map_err(|e| checksum(&format!("bad header: {e}")))?;
    let n = r.u32().ok_or_else(|| checksum("tensor count missing"))? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let start = r.pos;
        let name_len = r
            .take(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .ok_or_else(|| checksum("tensor truncated"))?;
        let name = std::str::from_utf8(r.take(name_len as usize).ok_or_else(|| checksum("tensor truncated"))?)
            .map_err(|_| checksum("tensor name is not UTF-8"))?
            .to_owned();
        let ndim = r.take(1).ok_or_else(|| checksum("tensor truncated"))?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32().ok_or_else(|| checksum("tensor truncated"))? as usize);
        }
        let (rows, cols) = match dims.as_slice() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            _ => return Err(checksum(&format!("tensor `{name}` has unsupported rank {ndim}"))),
        };
        let raw = r.take(8 * rows * cols).ok_or_else(|| checksum("tensor truncated"))?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let end = r.pos;
        let crc = r.u32().ok_or_else(|| checksum("tensor truncated"))?;
        if crc32fast::hash(&body[start..end]) != crc {
            return Err(checksum(&format!("tensor `{name}` checksum mismatch")));
        }
        tensors.push(Tensor { name, rows, cols, data });
    }
    if r.pos != body.len() {
        return Err(checksum("trailing bytes after tensors"));
    }
    let params = Parameters::from_tensors(tensors)?;
    if !params.all_finite() {
        return Err(checksum("non-finite parameter values"));
    }
    Ok(Checkpoint {
        config: header.config,
        tailor: header.tailor,
        stage: header.stage,
        k: header.k,
        seed: header.seed,
        params,
    })
}
