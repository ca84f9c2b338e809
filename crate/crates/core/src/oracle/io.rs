use std::io::{Read, Write};

use super::{DistanceTable, RewardMode};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"ANLGDIST";
const VERSION: u32 = 1;

/// Binary table: magic, version, env id, reward mode, state count, then
/// `n * n` little-endian u32 entries (`u32::MAX` = unreachable).
pub fn write_table<W: Write>(table: &DistanceTable, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let id = table.env_id.as_bytes();
    w.write_all(&(id.len() as u32).to_le_bytes())?;
    w.write_all(id)?;
    w.write_all(&[table.reward_mode.code()])?;
    w.write_all(&(table.state_count() as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(table.raw_entries().len() * 4);
    for v in table.raw_entries() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_table<R: Read>(mut r: R) -> Result<DistanceTable> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a distance table file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported distance table version {version}")));
    }
    let len = read_u32(&mut r)? as usize;
    let mut id = vec![0u8; len];
    r.read_exact(&mut id)?;
    let env_id = String::from_utf8(id).map_err(|e| Error::Format(e.to_string()))?;
    let mut mode = [0u8; 1];
    r.read_exact(&mut mode)?;
    let mode = RewardMode::from_code(mode[0])
        .ok_or_else(|| Error::Format(format!("unknown reward mode {}", mode[0])))?;
    let n = read_u32(&mut r)? as usize;
    let mut raw = vec![0u8; n * n * 4];
    r.read_exact(&mut raw)?;
    let d = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    DistanceTable::from_raw(env_id, mode, n, d)
}
