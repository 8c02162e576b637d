//! Checkpoint container: every named array the run needs to resume.
//!
//! Layout: magic `DDVI1`, u64 little-endian config echo length, the echo as
//! UTF-8 `key = value` text, then for each array: u64 name length, name
//! bytes, u64 rank, u64 dims, raw little-endian f64 values. Arrays repeat
//! to end of file. Round-trips are bit-exact, including non-finite float
//! payloads, because values never pass through decimal formatting.
//!
//! Alongside model parameters a checkpoint stores optimizer moments
//! (`adam.m.*`, `adam.v.*`), the iteration counter (`meta.iter`), label
//! count (`meta.classes`), normalization statistics (`norm.*`) and the
//! optional projection (`pca.*`). Random state needs no serialization: all
//! streams are derived from the seed in the config echo plus the iteration
//! counter, so (echo, meta.iter) is the complete resume state.
//!
//! The decoder is hardened against malformed input: every declared length
//! is validated against the remaining byte count before any allocation.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ParamStore, Tensor};

pub const MAGIC: &[u8; 5] = b"DDVI1";

/// Arrays with these prefixes or names are run state, not model parameters.
pub const RESERVED_PREFIXES: [&str; 5] = ["adam.m.", "adam.v.", "meta.", "norm.", "pca."];

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_echo: String,
    pub arrays: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(config_echo: String) -> Self {
        Checkpoint { config_echo, arrays: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.arrays.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name)?;
        if t.data.len() != 1 {
            return Err(Error::Checkpoint(format!("{name} is not a scalar")));
        }
        Ok(t.data[0])
    }

    /// Model parameters only: every array not claimed by a reserved prefix.
    pub fn param_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, t) in &self.arrays {
            if !RESERVED_PREFIXES.iter().any(|p| name.starts_with(p)) {
                store.insert(name, t.clone());
            }
        }
        store
    }
}

pub fn encode(cp: &Checkpoint) -> Vec<u8> {
    let echo = cp.config_echo.as_bytes();
    let mut out = Vec::with_capacity(
        MAGIC.len()
            + 8
            + echo.len()
            + cp.arrays
                .iter()
                .map(|(n, t)| 8 + n.len() + 8 + 8 * t.shape.len() + 8 * t.data.len())
                .sum::<usize>(),
    );
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(echo.len() as u64).to_le_bytes());
    out.extend_from_slice(echo);
    for (name, t) in &cp.arrays {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u64).to_le_bytes());
        for d in &t.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Checkpoint(format!(
                "truncated: {what} needs {n} bytes, {} left",
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    /// A declared count that must fit in the remaining bytes at `unit`
    /// bytes apiece; rejects absurd lengths before any allocation.
    fn bounded_len(&mut self, unit: usize, what: &str) -> Result<usize> {
        let raw = self.u64(what)?;
        let max = (self.remaining() / unit.max(1)) as u64;
        if raw > max {
            return Err(Error::Checkpoint(format!(
                "{what} declares {raw} units but only {max} fit in the remaining bytes"
            )));
        }
        Ok(raw as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic = cur.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let echo_len = cur.bounded_len(1, "config echo length")?;
    let echo_bytes = cur.take(echo_len, "config echo")?;
    let config_echo = std::str::from_utf8(echo_bytes)
        .map_err(|_| Error::Checkpoint("config echo is not UTF-8".into()))?
        .to_string();

    let mut arrays = BTreeMap::new();
    while cur.remaining() > 0 {
        let name_len = cur.bounded_len(1, "array name length")?;
        let name_bytes = cur.take(name_len, "array name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
            .to_string();
        if name.is_empty() {
            return Err(Error::Checkpoint("empty array name".into()));
        }
        let rank = cur.bounded_len(8, "rank")?;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("array {name}: rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for i in 0..rank {
            let d = cur.u64(&format!("dim {i} of {name}"))? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Checkpoint(format!("array {name}: size overflow")))?;
            shape.push(d);
        }
        if numel > cur.remaining() / 8 {
            return Err(Error::Checkpoint(format!(
                "array {name}: {numel} values declared but only {} bytes left",
                cur.remaining()
            )));
        }
        let raw = cur.take(numel * 8, &format!("values of {name}"))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if arrays.insert(name.clone(), Tensor { shape, data }).is_some() {
            return Err(Error::Checkpoint(format!("duplicate array {name}")));
        }
    }
    Ok(Checkpoint { config_echo, arrays })
}

/// Atomic save: write to a temporary file in the destination directory,
/// then rename over the target, so readers never observe a partial file.
pub fn save(cp: &Checkpoint, path: &Path) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d),
        None => tempfile::NamedTempFile::new_in("."),
    }
    .map_err(Error::Io)?;
    std::fs::write(tmp.path(), encode(cp)).map_err(Error::Io)?;
    tmp.persist(path)
        .map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}
