//! Little-endian binary checkpoints: magic `DABF`, format version, record
//! count, then per record a `u16` name length, the UTF-8 name, a `u8` rank,
//! `u32` dimensions and `f32` values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DABF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.shape.len() as u8);
        for &d in &r.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &r.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<Record>> {
    let bad = |msg: String| Error::Format { path: path.to_path_buf(), msg };
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad(format!("truncated at byte {pos}")))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(bad("bad magic (not a checkpoint)".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("checkpoint version {version}, expected {VERSION}")));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("record name is not UTF-8".into()))?;
        let rank = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(4 * n)?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        records.push(Record { name, shape, values });
    }
    if pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(records)
}

/// Parameter records in store order, followed by `extra`.
pub fn records_of(store: &ParamStore, extra: &[(&str, f64)]) -> Vec<Record> {
    let mut out: Vec<Record> = store
        .iter()
        .map(|(_, name, t)| Record {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            values: t.data().iter().map(|&v| v as f32).collect(),
        })
        .collect();
    out.extend(extra.iter().map(|&(n, v)| Record { name: n.to_string(), shape: vec![1], values: vec![v as f32] }));
    out
}

pub fn save(path: &Path, store: &ParamStore, extra: &[(&str, f64)]) -> Result<()> {
    fs::write(path, encode(&records_of(store, extra)))?;
    Ok(())
}

/// Loaded checkpoint: parameters written into a store, the rest returned.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<Vec<Record>> {
    let records = decode(&fs::read(path)?, path)?;
    let mut extra = Vec::new();
    let mut seen = vec![false; store.len()];
    for r in records {
        match store.id(&r.name) {
            Some(id) => {
                let t = Tensor::new(r.shape.clone(), r.values.iter().map(|&v| v as f64).collect())?;
                store.set(id, t).map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })?;
                seen[id.index()] = true;
            }
            None => extra.push(r),
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        let name = store.iter().nth(missing).map(|(_, n, _)| n.to_string()).unwrap_or_default();
        return Err(Error::Format { path: path.to_path_buf(), msg: format!("parameter `{name}` missing") });
    }
    Ok(extra)
}
