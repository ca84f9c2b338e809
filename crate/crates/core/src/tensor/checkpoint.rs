//! Versioned binary parameter files with a shape manifest.

use std::io::{Read, Write};

use super::{Matrix, ParamStore};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"ANLGCKPT";
const VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Layout: magic, version, count, `count` manifest entries
/// (name length, name bytes, rows, cols), then every value as little-endian f64.
pub fn write_params<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(&mut w, VERSION)?;
    put_u32(&mut w, store.len() as u32)?;
    for (name, m) in store.iter() {
        put_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put_u32(&mut w, m.rows() as u32)?;
        put_u32(&mut w, m.cols() as u32)?;
    }
    let mut buf = Vec::with_capacity(store.scalar_count() * 8);
    for (_, m) in store.iter() {
        for v in m.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_params<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a parameter checkpoint".into()));
    }
    let version = get_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = get_u32(&mut r)? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let len = get_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rows = get_u32(&mut r)? as usize;
        let cols = get_u32(&mut r)? as usize;
        manifest.push((name, rows, cols));
    }
    let mut store = ParamStore::new();
    for (name, rows, cols) in manifest {
        let mut raw = vec![0u8; rows * cols * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.add(name, Matrix::from_vec(rows, cols, data));
    }
    Ok(store)
}

/// Reads a checkpoint into `store`, rejecting any manifest difference.
pub fn load_params_into<R: Read>(store: &mut ParamStore, r: R) -> Result<()> {
    let loaded = read_params(r)?;
    let (want, got) = (store.manifest(), loaded.manifest());
    if want != got {
        let detail = want
            .iter()
            .zip(&got)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("expected {a:?}, found {b:?}"))
            .unwrap_or_else(|| format!("expected {} tensors, found {}", want.len(), got.len()));
        return Err(Error::Format(format!("checkpoint manifest mismatch: {detail}")));
    }
    *store = loaded;
    Ok(())
}
