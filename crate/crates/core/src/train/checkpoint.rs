//! Binary checkpoints. Layout, all integers little-endian:
//!
//! ```text
//! "MSHF" | u32 version | u64 spec hash | u32 epoch
//! u32 len | RNG state bytes
//! u32 count | count × (u32 name len | name | u32 rank | rank × u32 dim | f32 payload)
//! ```
//!
//! Tensors are stored sorted by name, so saving a loaded checkpoint
//! reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::atomic_write;

pub const MAGIC: &[u8; 4] = b"MSHF";
pub const VERSION: u32 = 1;
pub const MOMENTUM_PREFIX: &str = "momentum:";
pub const NORM_MEAN: &str = "norm:mean";
pub const NORM_STD: &str = "norm:std";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec_hash: u64,
    /// Completed training epochs.
    pub epoch: u32,
    pub rng_state: Vec<u8>,
    pub tensors: BTreeMap<String, Tensor>,
}

/// ChaCha8 seed, stream and word position: 32 + 8 + 16 bytes.
pub fn encode_rng(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = rng.get_seed().to_vec();
    out.extend(rng.get_stream().to_le_bytes());
    out.extend(rng.get_word_pos().to_le_bytes());
    out
}

pub fn decode_rng(bytes: &[u8]) -> Result<ChaCha8Rng> {
    if bytes.len() != 56 {
        return Err(Error::Checkpoint(format!(
            "RNG state has {} bytes, expected 56",
            bytes.len()
        )));
    }
    let mut rng = ChaCha8Rng::from_seed(bytes[..32].try_into().unwrap());
    rng.set_stream(u64::from_le_bytes(bytes[32..40].try_into().unwrap()));
    rng.set_word_pos(u128::from_le_bytes(bytes[40..56].try_into().unwrap()));
    Ok(rng)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend(self.spec_hash.to_le_bytes());
        out.extend(self.epoch.to_le_bytes());
        out.extend((self.rng_state.len() as u32).to_le_bytes());
        out.extend(&self.rng_state);
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let spec_hash = r.u64("spec hash")?;
        let epoch = r.u32("epoch")?;
        let n = r.u32("RNG state length")? as usize;
        let rng_state = r.take(n, "RNG state")?.to_vec();
        let count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("dimension").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * 4, &name)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            spec_hash,
            epoch,
            rng_state,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn check_hash(&self, expected: u64) -> Result<()> {
        if self.spec_hash != expected {
            return Err(Error::SpecHashMismatch {
                expected,
                found: self.spec_hash,
            });
        }
        Ok(())
    }
}
