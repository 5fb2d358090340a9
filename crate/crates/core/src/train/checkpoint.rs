//! `MMCK` checkpoint format (little-endian):
//!
//! ```text
//! magic "MMCK" | version u32 | config_len u32 | config TOML bytes
//! tensor block: count u32, then per tensor
//!     name_len u32 | name bytes | rank u32 | dims u32 x rank | f64 x prod(dims)
//! Adam: step_count u64 | learning_rate, beta1, beta2, epsilon as f64
//!     first-moment tensor block | second-moment tensor block
//! ```
//!
//! Payloads are 64-bit IEEE-754 so a save/load round trip is bit exact.

use std::path::Path;

use crate::binio::{put_u32, put_u64, write_atomic, Reader};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::params::{NamedTensors, Parameters};

use super::{AdamConfig, AdamState, TrainConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
}

fn put_tensors(out: &mut Vec<u8>, tensors: &impl Parameters) {
    let layout = tensors.layout();
    put_u32(out, layout.len() as u32);
    tensors.visit(&mut |name, shape, data| {
        put_u32(out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(out, shape.len() as u32);
        for &d in shape {
            put_u32(out, d as u32);
        }
        for &v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
}

fn read_tensors(r: &mut Reader) -> Result<NamedTensors> {
    let count = r.u32()? as usize;
    let mut out = NamedTensors::default();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::InvalidFile("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidFile(format!("tensor {name} shape overflows")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::InvalidFile("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(name, shape, data);
    }
    Ok(out)
}

/// Copies `source` into `target`, requiring identical names and shapes.
fn fill_from(target: &mut impl Parameters, source: &NamedTensors, what: &str) -> Result<()> {
    if target.layout() != source.layout() {
        return Err(Error::InvalidFile(format!("{what} tensors do not match the configured model")));
    }
    let mut k = 0;
    target.visit_mut(&mut |_, _, data| {
        data.copy_from_slice(&source.tensors[k].data);
        k += 1;
    });
    Ok(())
}

impl Checkpoint {
    pub fn new(config: TrainConfig, params: ModelParams) -> Self {
        let adam = AdamState::new(config.optimizer.clone(), &params);
        Checkpoint { config, params, adam }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = self.config.to_toml()?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, config.len() as u32);
        out.extend_from_slice(config.as_bytes());
        put_tensors(&mut out, &self.params);
        put_u64(&mut out, self.adam.step_count);
        let a = &self.adam.config;
        for v in [a.learning_rate, a.beta1, a.beta2, a.epsilon] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_tensors(&mut out, &self.adam.first_moment);
        put_tensors(&mut out, &self.adam.second_moment);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        let magic = r.magic()?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let config_len = r.u32()? as usize;
        let config_text = std::str::from_utf8(r.take(config_len)?)
            .map_err(|_| Error::InvalidFile("config blob is not UTF-8".into()))?;
        let config = TrainConfig::from_toml(config_text)?;
        let tensors = read_tensors(&mut r)?;
        let mut params = ModelParams::zeros(&config.model)?;
        fill_from(&mut params, &tensors, "parameter")?;

        let step_count = r.u64()?;
        let adam_config = AdamConfig {
            learning_rate: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            epsilon: r.f64()?,
        };
        let first_moment = read_tensors(&mut r)?;
        let second_moment = read_tensors(&mut r)?;
        let layout = params.layout();
        if first_moment.layout() != layout || second_moment.layout() != layout {
            return Err(Error::InvalidFile("Adam moments do not match the parameters".into()));
        }
        if !r.is_empty() {
            return Err(Error::InvalidFile("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            config,
            params,
            adam: AdamState {
                config: adam_config,
                step_count,
                first_moment,
                second_moment,
            },
        })
    }

    /// Writes through a temp file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
