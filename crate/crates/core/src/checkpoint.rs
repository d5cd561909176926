//! Versioned checkpoint container: a JSON configuration block plus named
//! single-precision tensors, each tagged with its role.
//!
//! ```text
//! "RASRCKP1" | version: u32 | len: u32 | config json | step: u64 | count: u32 |
//!   count × ( len: u32 | name utf-8 | role: u8 | n: u64 | n × f32 )
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{RasrError, Result};
use crate::generator::{init_generator, GeneratorConfig, GeneratorState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RASRCKP1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TensorRole {
    Frozen,
    Trainable,
    Optimizer,
}

impl TensorRole {
    fn code(self) -> u8 {
        match self {
            TensorRole::Frozen => 0,
            TensorRole::Trainable => 1,
            TensorRole::Optimizer => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(TensorRole::Frozen),
            1 => Some(TensorRole::Trainable),
            2 => Some(TensorRole::Optimizer),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub role: TensorRole,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub step: u64,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Names of the trainable tensors.
    pub fn trainable_names(&self) -> Vec<&str> {
        self.tensors
            .iter()
            .filter(|t| t.role == TensorRole::Trainable)
            .map(|t| t.name.as_str())
            .collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(&self.config)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(config.len())?.to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&len_u32(self.tensors.len())?.to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&len_u32(t.name.len())?.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.role.code());
            out.extend_from_slice(&(t.values.len() as u64).to_le_bytes());
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let config = serde_json::from_slice(r.take(n)?)
            .map_err(|e| corrupt(&format!("config block: {e}")))?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        let mut seen = BTreeSet::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| corrupt("tensor name is not utf-8"))?;
            if !seen.insert(name.clone()) {
                return Err(corrupt(&format!("duplicate tensor `{name}`")));
            }
            let role = TensorRole::from_code(r.take(1)?[0])
                .ok_or_else(|| corrupt(&format!("bad role for `{name}`")))?;
            let len = r.u64()? as usize;
            let raw = r.take(len.checked_mul(4).ok_or_else(|| corrupt("tensor too large"))?)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor { name, role, values });
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            config,
            step,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), &self.encode()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| RasrError::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| RasrError::InvalidInput(format!("length {n} exceeds u32")))
}

fn corrupt(msg: &str) -> RasrError {
    RasrError::CorruptCheckpoint(msg.to_string())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Generator parameters as tensors, roles from the trainable flag.
pub fn generator_tensors(state: &GeneratorState) -> Vec<Tensor> {
    let mut out = Vec::new();
    state.visit_params(&mut |name, v, trainable| {
        out.push(Tensor {
            name,
            role: if trainable {
                TensorRole::Trainable
            } else {
                TensorRole::Frozen
            },
            values: v.iter().map(|&x| x as f32).collect(),
        });
    });
    out
}

/// Overwrites every generator parameter with the tensor of the same name.
/// Frozen tensors may be absent, in which case the seeded values stay; a
/// missing trainable tensor or a size mismatch is an error.
pub fn assign_generator(state: &mut GeneratorState, ckpt: &Checkpoint) -> Result<()> {
    let mut err = None;
    state.visit_params_mut(&mut |name, v, trainable| {
        if err.is_some() {
            return;
        }
        match ckpt.tensor(&name) {
            Some(t) if t.values.len() == v.len() => {
                for (dst, src) in v.iter_mut().zip(&t.values) {
                    *dst = *src as f64;
                }
            }
            Some(t) => {
                err = Some(corrupt(&format!(
                    "tensor `{name}` has {} values, expected {}",
                    t.values.len(),
                    v.len()
                )))
            }
            None if trainable => err = Some(corrupt(&format!("missing trainable tensor `{name}`"))),
            None => {}
        }
    });
    err.map_or(Ok(()), Err)
}

/// Configuration block of a generator-only checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct GeneratorMeta {
    generator: GeneratorConfig,
}

/// Checkpoint holding only the generator.
pub fn generator_checkpoint(state: &GeneratorState, step: u64) -> Result<Checkpoint> {
    Ok(Checkpoint {
        config: serde_json::to_value(GeneratorMeta {
            generator: state.config.clone(),
        })?,
        step,
        tensors: generator_tensors(state),
    })
}

pub fn save_generator(state: &GeneratorState, path: impl AsRef<Path>) -> Result<()> {
    generator_checkpoint(state, 0)?.save(path)
}

/// Rebuilds a generator from any checkpoint whose configuration block has a
/// `generator` entry.
pub fn generator_from_checkpoint(ckpt: &Checkpoint) -> Result<GeneratorState> {
    let cfg = ckpt
        .config
        .get("generator")
        .cloned()
        .ok_or_else(|| corrupt("configuration has no generator entry"))?;
    let cfg: GeneratorConfig =
        serde_json::from_value(cfg).map_err(|e| corrupt(&format!("generator config: {e}")))?;
    let mut state = init_generator(cfg)?;
    assign_generator(&mut state, ckpt)?;
    Ok(state)
}

pub fn load_generator(path: impl AsRef<Path>) -> Result<GeneratorState> {
    generator_from_checkpoint(&Checkpoint::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorState {
        init_generator(GeneratorConfig {
            widths: [4, 6, 8, 10],
            text_dim: 4,
            max_tokens: 8,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn generator_round_trip_is_exact() {
        let mut s = small();
        s.visit_params_mut(&mut |_, v, t| {
            if t {
                for (i, x) in v.iter_mut().enumerate() {
                    *x = ((i as f64) * 0.37).sin() as f32 as f64;
                }
            }
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        save_generator(&s, &path).unwrap();
        let back = load_generator(&path).unwrap();
        assert_eq!(back, s);
        let ckpt = Checkpoint::load(&path).unwrap();
        let trainable: usize = ckpt
            .tensors
            .iter()
            .filter(|t| t.role == TensorRole::Trainable)
            .map(|t| t.values.len())
            .sum();
        assert_eq!(trainable, s.config.trainable_parameter_count());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = generator_checkpoint(&small(), 7).unwrap().encode().unwrap();
        assert_eq!(Checkpoint::decode(&bytes).unwrap().step, 7);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(RasrError::CorruptCheckpoint(_))));
        for cut in [4, 20, bytes.len() - 1] {
            assert!(Checkpoint::decode(&bytes[..cut]).is_err());
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
    }

    #[test]
    fn missing_trainable_tensor_is_an_error() {
        let s = small();
        let mut ckpt = generator_checkpoint(&s, 0).unwrap();
        ckpt.tensors.retain(|t| t.role != TensorRole::Trainable);
        assert!(generator_from_checkpoint(&ckpt).is_err());
        let mut ckpt = generator_checkpoint(&s, 0).unwrap();
        ckpt.tensors.retain(|t| t.role != TensorRole::Frozen);
        assert_eq!(generator_from_checkpoint(&ckpt).unwrap(), s);
    }
}
