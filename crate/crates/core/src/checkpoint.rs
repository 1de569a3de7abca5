//! Self-describing binary checkpoints.
//!
//! Layout: an 8-byte magic, a little-endian `u32` format version, a `u64`
//! manifest length, the JSON manifest, then every tensor listed in the
//! manifest as raw little-endian `f64` in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::MemoryPool;
use crate::model::{Model, ModelDims, ModelVariant};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"LGNCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const POOL_ENTRY: &str = "memory.prototypes";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub pool: MemoryPool,
    pub config: TrainConfig,
    pub step: u64,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, config: &TrainConfig) -> Self {
        Self {
            model: state.model.clone(),
            pool: state.pool.clone(),
            config: config.clone(),
            step: state.step,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    variant: ModelVariant,
    dims: ModelDims,
    config: TrainConfig,
    step: u64,
    tensors: Vec<(String, Vec<usize>)>,
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut entries: Vec<(&str, &Tensor)> = ckpt.model.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
    entries.push((POOL_ENTRY, ckpt.pool.as_tensor()));
    let manifest = Manifest {
        variant: ckpt.model.variant,
        dims: ckpt.model.dims.clone(),
        config: ckpt.config.clone(),
        step: ckpt.step,
        tensors: entries.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let floats: usize = entries.iter().map(|(_, t)| t.len()).sum();
    let mut out = Vec::with_capacity(20 + json.len() + 8 * floats);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in entries {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let found = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if found != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let len = u64::from_le_bytes(r.take(8, "manifest length")?.try_into().expect("8 bytes"));
    let manifest: Manifest =
        serde_json::from_slice(r.take(len as usize, "manifest")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut params = ParamStore::new();
    let mut pool = None;
    for (name, shape) in &manifest.tensors {
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8, name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::from_vec(shape, data);
        if name == POOL_ENTRY {
            pool = Some(MemoryPool::from_tensor(t)?);
        } else {
            params.insert(name.clone(), t);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let pool = pool.ok_or_else(|| Error::Checkpoint("memory pool missing".into()))?;
    Ok(Checkpoint {
        model: Model {
            variant: manifest.variant,
            dims: manifest.dims,
            params,
        },
        pool,
        config: manifest.config,
        step: manifest.step,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ckpt)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
