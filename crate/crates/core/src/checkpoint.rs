//! Binary checkpoint container.
//!
//! ```text
//! "EVDE"  u32 version (=1)  u32 block count
//! per block: u16 name length, UTF-8 name, u8 ndim, u32 dims..., f32 payload
//! u64 seed, then the RNG state blob up to end of file
//! ```
//!
//! All integers and floats are little-endian; payloads are row-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"EVDE";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    blocks: Vec<(String, Tensor<f32>)>,
    pub seed: u64,
    pub rng_state: Vec<u8>,
}

impl Checkpoint {
    pub fn new(seed: u64, rng_state: Vec<u8>) -> Self {
        Self { blocks: Vec::new(), seed, rng_state }
    }

    pub fn blocks(&self) -> &[(String, Tensor<f32>)] {
        &self.blocks
    }

    /// Add a block, converting to single precision.
    pub fn insert<S: Scalar>(&mut self, name: impl Into<String>, tensor: &Tensor<S>) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("block name of {} bytes is too long", name.len())));
        }
        if tensor.ndim() > u8::MAX as usize || tensor.shape().iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Format(format!("block {name} has an unrepresentable shape")));
        }
        if self.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate block {name}")));
        }
        self.blocks.push((name, tensor.cast()));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Block `name` converted to `S`; missing blocks are an error.
    pub fn require<S: Scalar>(&self, name: &str) -> Result<Tensor<S>> {
        self.get(name).map(|t| t.cast()).ok_or_else(|| Error::Format(format!("checkpoint has no block {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, t) in &self.blocks {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.rng_state);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        let count = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("block name is not UTF-8".into()))?.to_string();
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let payload = r.take(len.checked_mul(4).ok_or_else(|| Error::Format("block too large".into()))?)?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("block {name}: {e}")))?;
            blocks.push((name, t));
        }
        let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let rng_state = bytes[r.pos..].to_vec();
        Ok(Self { blocks, seed, rng_state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
