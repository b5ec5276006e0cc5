//! Binary checkpoints. Layout, all integers little-endian:
//!
//! ```text
//! "CSTK" | u32 version | [u8; 32] sha256(config text) | u32 len | config text
//! u32 n_params | n_params x (u32 name_len | name | u32 rank | rank x u32 dim | f64 values)
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::CstConfig;
use super::network::check_params;
use crate::error::{CstError, Result};
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSTK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Hex sha256 of the config's canonical text.
pub fn config_hash(cfg: &CstConfig) -> String {
    hex(&Sha256::digest(cfg.to_text().as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_checkpoint(cfg: &CstConfig, store: &ParamStore) -> Vec<u8> {
    let text = cfg.to_text();
    let mut out = Vec::with_capacity(64 + text.len() + store.numel() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION as usize);
    out.extend_from_slice(&Sha256::digest(text.as_bytes()));
    put_u32(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, store.len());
    for (name, p) in store.iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, p.shape.len());
        for &d in &p.shape {
            put_u32(&mut out, d);
        }
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CstError::Length {
                expected: self.pos + n,
                found: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn text(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CstError::Format("checkpoint text is not UTF-8".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CstConfig, ParamStore)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(CstError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(CstError::Format(format!("unsupported checkpoint version {}", version)));
    }
    let hash = r.take(32)?.to_vec();
    let len = r.u32()?;
    let text = r.text(len)?;
    if Sha256::digest(text.as_bytes()).as_slice() != hash.as_slice() {
        return Err(CstError::Format("checkpoint config hash mismatch".into()));
    }
    let cfg = CstConfig::from_text(&text)?;
    let n = r.u32()?;
    let mut store = ParamStore::default();
    for _ in 0..n {
        let nl = r.u32()?;
        let name = r.text(nl)?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(count * 8)?;
        let value = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(name, shape, value)?;
    }
    if r.pos != bytes.len() {
        return Err(CstError::Format(format!(
            "{} trailing bytes in checkpoint",
            bytes.len() - r.pos
        )));
    }
    check_params(&cfg, &store)?;
    Ok((cfg, store))
}

pub fn save_checkpoint(path: impl AsRef<Path>, cfg: &CstConfig, store: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(cfg, store)).map_err(|e| CstError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CstConfig, ParamStore)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| CstError::io(path, e))?;
    decode_checkpoint(&bytes)
}
