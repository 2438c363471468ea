//! Flat little-endian parameter container.
//!
//! Layout: magic `VISAW01\0`, `u32` record count, then per record a `u32`
//! name length, UTF-8 name, `u32` rank, `rank` x `u32` extents and the raw
//! `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::param::ParamStore;
use crate::real::Real;

pub const MAGIC: &[u8; 8] = b"VISAW01\0";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a parameter checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("parameter name is not UTF-8")]
    BadName,
    #[error("checkpoint is missing parameter `{0}`")]
    Missing(String),
    #[error("parameter `{name}` has shape {found:?} in checkpoint, model expects {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn encode<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.tensor.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Record>, CheckpointError> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let count = c.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        let rank = c.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| c.u32("extent").map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n * 4, "values")?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        records.push(Record {
            name,
            shape,
            values,
        });
    }
    Ok(records)
}

pub fn save<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&encode(store)).map_err(io)
}

/// Loads every parameter of `store` by name from the checkpoint at `path`.
pub fn load_into<T: Real>(path: &Path, store: &mut ParamStore<T>) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(io)?
        .read_to_end(&mut buf)
        .map_err(io)?;
    apply(&decode(&buf)?, store)
}

pub fn apply<T: Real>(
    records: &[Record],
    store: &mut ParamStore<T>,
) -> Result<(), CheckpointError> {
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let rec = records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
        let p = store.get_mut(id);
        if rec.shape != p.tensor.shape() {
            return Err(CheckpointError::Shape {
                name,
                expected: p.tensor.shape().to_vec(),
                found: rec.shape.clone(),
            });
        }
        for (dst, &v) in p.tensor.data_mut().iter_mut().zip(&rec.values) {
            *dst = T::of(v as f64);
        }
    }
    Ok(())
}
