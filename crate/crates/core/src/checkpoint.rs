//! Binary checkpoint: `ROAD` magic, version, config hash, tensor table and an
//! RNG blob. All integers and payloads are little-endian.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use road_autodiff::Tensor;

use crate::error::{Result, RoadError};
use crate::model::Parameters;

pub const MAGIC: &[u8; 4] = b"ROAD";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub config_hash: [u8; 32],
    pub tensors: Vec<(String, StoredTensor)>,
    pub rng: Vec<u8>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor_f32(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.get(name) {
            Some(StoredTensor::F32(t)) => Ok(t),
            Some(StoredTensor::F64(_)) => Err(RoadError::Contract(format!("checkpoint tensor {name} is f64"))),
            None => Err(RoadError::Contract(format!("checkpoint lacks tensor {name}"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (dtype, shape) = match t {
                StoredTensor::F32(t) => (DTYPE_F32, t.shape()),
                StoredTensor::F64(t) => (DTYPE_F64, t.shape()),
            };
            out.push(dtype);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                StoredTensor::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                StoredTensor::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        out.extend_from_slice(&(self.rng.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.rng);
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { path, bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.bad("missing ROAD magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.bad(&format!("unsupported version {version}")));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let iteration = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.bad("tensor name is not UTF-8"))?;
            let dtype = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.bad("shape overflows"))?;
            let t = match dtype {
                DTYPE_F32 => {
                    let raw = r.take(n.checked_mul(4).ok_or_else(|| r.bad("payload overflows"))?)?;
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    StoredTensor::F32(Tensor::new(shape, data).map_err(|e| r.bad(&e.to_string()))?)
                }
                DTYPE_F64 => {
                    let raw = r.take(n.checked_mul(8).ok_or_else(|| r.bad("payload overflows"))?)?;
                    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    StoredTensor::F64(Tensor::new(shape, data).map_err(|e| r.bad(&e.to_string()))?)
                }
                other => return Err(r.bad(&format!("unknown dtype tag {other}"))),
            };
            tensors.push((name, t));
        }
        let len = r.u32()? as usize;
        let rng = r.take(len)?.to_vec();
        if r.pos != bytes.len() {
            return Err(r.bad("trailing bytes"));
        }
        Ok(Self { iteration, config_hash, tensors, rng })
    }

    /// Writes via a temporary file, so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()).map_err(|e| RoadError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| RoadError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| RoadError::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }
}

/// `prefix + name` entries for every parameter of `model`.
pub fn store_parameters<M: Parameters<f32> + ?Sized>(model: &M, prefix: &str) -> Vec<(String, StoredTensor)> {
    model
        .named_parameters()
        .into_iter()
        .map(|(n, t)| (format!("{prefix}{n}"), StoredTensor::F32(t.clone())))
        .collect()
}

/// Overwrites every parameter of `model` from `prefix + name`; shapes must match.
pub fn load_parameters<M: Parameters<f32> + ?Sized>(model: &mut M, checkpoint: &Checkpoint, prefix: &str) -> Result<()> {
    for (name, p) in model.named_parameters_mut() {
        let stored = checkpoint.tensor_f32(&format!("{prefix}{name}"))?;
        if stored.shape() != p.shape() {
            return Err(RoadError::Contract(format!(
                "checkpoint tensor {prefix}{name} has shape {:?}, model expects {:?}",
                stored.shape(),
                p.shape()
            )));
        }
        *p = stored.clone();
    }
    Ok(())
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bad(&self, detail: &str) -> RoadError {
        RoadError::Format { path: self.path.to_path_buf(), detail: format!("{detail} (offset {})", self.pos) }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| self.bad("truncated"))?;
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

/// Seed (32 bytes), stream (u64) and word position (u128).
pub fn rng_state(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = rng.get_seed().to_vec();
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

pub fn restore_rng(blob: &[u8]) -> Result<ChaCha8Rng> {
    if blob.len() != 56 {
        return Err(RoadError::Contract(format!("RNG blob has {} bytes, expected 56", blob.len())));
    }
    let mut rng = ChaCha8Rng::from_seed(blob[..32].try_into().unwrap());
    rng.set_stream(u64::from_le_bytes(blob[32..40].try_into().unwrap()));
    rng.set_word_pos(u128::from_le_bytes(blob[40..56].try_into().unwrap()));
    Ok(rng)
}
