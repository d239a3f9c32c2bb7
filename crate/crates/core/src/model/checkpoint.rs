//! Binary parameter files.
//!
//! Layout: `"CXFZ"`, version `u32`, record count `u32`, then per parameter
//! (sorted by name): name length `u32`, UTF-8 name, dtype `u8`, rank `u32`,
//! extents `u64` each, little-endian payload. All integers little-endian.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"CXFZ";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }
}

pub fn checkpoint_bytes(store: &ParamStore, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(dtype.tag());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &e in p.value.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            match dtype {
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    out
}

pub fn save_checkpoint(store: &ParamStore, path: &Path, dtype: Dtype) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(store, dtype))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!(
                "truncated checkpoint: needed {n} bytes for {what} at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parse a checkpoint; every parameter comes back trainable.
pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let count = r.u32("record count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1, "dtype")?[0];
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = match dtype {
            0 => r
                .take(n * 8, &name)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            1 => r
                .take(n * 4, &name)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            t => return Err(Error::Checkpoint(format!("unknown dtype tag {t} for {name}"))),
        };
        store
            .insert(&name, Tensor::new(&shape, data)?, true)
            .map_err(|_| Error::Checkpoint(format!("duplicate parameter {name}")))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last record",
            bytes.len() - r.pos
        )));
    }
    Ok(store)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    load_checkpoint_bytes(&std::fs::read(path)?)
}

impl ParamStore {
    /// Overwrite every value from `loaded`, which must hold exactly the same
    /// names and shapes. Nothing is modified on error.
    pub fn restore_exact(&mut self, loaded: &ParamStore) -> Result<()> {
        let mine: BTreeSet<&str> = self.names().collect();
        let theirs: BTreeSet<&str> = loaded.names().collect();
        let missing: Vec<&str> = mine.difference(&theirs).copied().collect();
        let extra: Vec<&str> = theirs.difference(&mine).copied().collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Checkpoint(format!(
                "parameter names differ; missing: {missing:?}, extra: {extra:?}"
            )));
        }
        for p in loaded.iter() {
            let cur = self.value(&p.name)?;
            if cur.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: checkpoint shape {:?}, model shape {:?}",
                    p.name,
                    p.value.shape(),
                    cur.shape()
                )));
            }
        }
        for p in loaded.iter() {
            self.set_value(&p.name, p.value.clone())?;
        }
        Ok(())
    }
}
