//! Binary parameter container.
//!
//! Layout: the 8-byte magic `EVLLMCKP`, a little-endian `u32` version, a
//! little-endian `u64` header length, the JSON header, then every tensor's
//! values as little-endian `f64` in header order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"EVLLMCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    /// Model-level state that is not a parameter tensor.
    pub metadata: serde_json::Value,
    pub tensors: Vec<CheckpointTensor>,
}

pub fn save_checkpoint<W: Write>(
    mut w: W,
    store: &ParamStore,
    seed: u64,
    config_hash: &str,
    metadata: serde_json::Value,
) -> Result<()> {
    let header = CheckpointHeader {
        version: VERSION,
        seed,
        config_hash: config_hash.to_string(),
        metadata,
        tensors: store
            .iter()
            .map(|(_, p)| CheckpointTensor {
                name: p.name().to_string(),
                shape: p.value().shape().to_vec(),
                frozen: p.is_frozen(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, p) in store.iter() {
        let mut buf = Vec::with_capacity(p.value().len() * 8);
        for v in p.value().data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint(format!("truncated checkpoint while reading {what}")))?;
    Ok(buf)
}

pub fn load_checkpoint<R: Read>(mut r: R) -> Result<(ParamStore, CheckpointHeader)> {
    if read_exact(&mut r, 8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut r, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let len = u64::from_le_bytes(read_exact(&mut r, 8, "header length")?.try_into().expect("8 bytes"));
    let header: CheckpointHeader = serde_json::from_slice(&read_exact(&mut r, len as usize, "header")?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut store = ParamStore::new();
    for t in &header.tensors {
        let count: usize = t.shape.iter().product();
        let bytes = read_exact(&mut r, count * 8, &t.name)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.add(t.name.clone(), Tensor::new(t.shape.clone(), data)?, t.frozen)?;
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after the last tensor", rest.len())));
    }
    Ok((store, header))
}
