//! Dataset file: header then one block per episode, little-endian throughout.
//!
//! Header: magic, version (u32), env id, factor manifest (count, then name and
//! domain size per factor), seed (u64), epsilon (f64), config hash, provenance
//! (JSON text), episode count (u32). Strings are a u32 byte length followed by
//! UTF-8 bytes. Each episode block: transition count T (u32), T+1 factor tuples
//! (u32 per factor), then T actions (u32).

use std::io::{Read, Write};

use serde::Serialize;

use super::{Episode, ProvenanceEntry, TransitionDataset};
use crate::envsim::{Environment, FactoredState};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"ANLGDATA";
const VERSION: u32 = 1;

/// Everything in a dataset file except the episode blocks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub env_id: String,
    pub factors: Vec<(String, usize)>,
    pub seed: u64,
    pub epsilon: f64,
    pub config_hash: String,
    pub provenance: Vec<ProvenanceEntry>,
    pub episodes: usize,
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
        self.0.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len())?;
        self.0.write_all(s.as_bytes())?;
        Ok(())
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b)?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn str(&mut self) -> Result<String> {
        let len = self.u32()?;
        let mut buf = vec![0u8; len];
        self.0.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn write_dataset<W: Write>(ds: &TransitionDataset, env: &Environment, w: W) -> Result<()> {
    let mut w = Writer(std::io::BufWriter::new(w));
    w.0.write_all(MAGIC)?;
    w.u32(VERSION as usize)?;
    w.str(&ds.env_id)?;
    w.u32(ds.factors.len())?;
    for (name, size) in &ds.factors {
        w.str(name)?;
        w.u32(*size)?;
    }
    w.0.write_all(&ds.seed.to_le_bytes())?;
    w.0.write_all(&ds.epsilon.to_le_bytes())?;
    w.str(&ds.config_hash)?;
    w.str(&serde_json::to_string(&ds.provenance)?)?;
    w.u32(ds.episodes().len())?;
    for ep in ds.episodes() {
        w.u32(ep.len())?;
        for &s in &ep.states {
            for v in env.decode(s).0 {
                w.u32(v)?;
            }
        }
        for &a in &ep.actions {
            w.u32(a)?;
        }
    }
    w.0.flush()?;
    Ok(())
}

fn read_header<R: Read>(r: &mut Reader<R>) -> Result<DatasetHeader> {
    if &r.bytes::<8>()? != MAGIC {
        return Err(Error::Format("not a dataset file".into()));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let env_id = r.str()?;
    let count = r.u32()?;
    let factors = (0..count)
        .map(|_| Ok((r.str()?, r.u32()?)))
        .collect::<Result<Vec<_>>>()?;
    let seed = u64::from_le_bytes(r.bytes()?);
    let epsilon = f64::from_le_bytes(r.bytes()?);
    let config_hash = r.str()?;
    let provenance = serde_json::from_str(&r.str()?)?;
    let episodes = r.u32()?;
    Ok(DatasetHeader {
        version,
        env_id,
        factors,
        seed,
        epsilon,
        config_hash,
        provenance,
        episodes,
    })
}

/// Reads only the header (for `describe`).
pub fn read_header_only<R: Read>(r: R) -> Result<DatasetHeader> {
    read_header(&mut Reader(std::io::BufReader::new(r)))
}

/// Reads a dataset, checking its factor manifest against `env`.
pub fn read_dataset<R: Read>(env: &Environment, r: R) -> Result<TransitionDataset> {
    let mut r = Reader(std::io::BufReader::new(r));
    let header = read_header(&mut r)?;
    let manifest: Vec<(String, usize)> = env
        .spec()
        .factors
        .iter()
        .map(|f| (f.name.clone(), f.domain_size))
        .collect();
    if header.env_id != env.id() || header.factors != manifest {
        return Err(Error::Format(format!(
            "dataset was written for {} with factors {:?}; expected {} with {:?}",
            header.env_id,
            header.factors,
            env.id(),
            manifest
        )));
    }
    let mut episodes = Vec::with_capacity(header.episodes);
    for _ in 0..header.episodes {
        let len = r.u32()?;
        let mut states = Vec::with_capacity(len + 1);
        for _ in 0..=len {
            let values = (0..manifest.len()).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let state = FactoredState(values);
            env.check_state(&state).map_err(|e| Error::Format(e.to_string()))?;
            states.push(env.encode(&state));
        }
        let actions = (0..len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        episodes.push(Episode { states, actions });
    }
    let mut ds = TransitionDataset::new(env, header.seed, header.epsilon, header.provenance, episodes)?;
    ds.config_hash = header.config_hash;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{apply_holdout, generate_play, HoldoutRule};
    use crate::par::Execution;

    #[test]
    fn roundtrip_preserves_everything() {
        let env = Environment::preset("gridscene-5").unwrap();
        let ds = generate_play(&env, 40, 0.2, 11, Execution::Sequential).unwrap();
        let (mut ds, _) = apply_holdout(&ds, &env, &HoldoutRule::drawer_with_window_closed()).unwrap();
        ds.config_hash = "abc123".into();
        let mut buf = Vec::new();
        write_dataset(&ds, &env, &mut buf).unwrap();
        let back = read_dataset(&env, buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        let header = read_header_only(buf.as_slice()).unwrap();
        assert_eq!(header.provenance, ds.provenance);
        assert_eq!(header.episodes, ds.episodes().len());

        let mut again = Vec::new();
        write_dataset(&back, &env, &mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn wrong_environment_is_rejected() {
        let grid = Environment::preset("gridscene-5").unwrap();
        let chain = Environment::preset("factorchain-3").unwrap();
        let ds = generate_play(&chain, 2, 0.2, 1, Execution::Sequential).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &chain, &mut buf).unwrap();
        assert!(read_dataset(&grid, buf.as_slice()).is_err());
    }
}
