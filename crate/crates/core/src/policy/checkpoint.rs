//! Binary checkpoint format. All integers and floats are little-endian.
//!
//! ```text
//! offset  size        field
//! 0       8           magic "SAFESHED"
//! 8       4   u32     format version (1)
//! 12      4   u32     arch tag: 0 = linear, 1 = lstm
//! 16      4   u32     hidden size (0 for linear)
//! 20      4   u32     input dim
//! 24      4   u32     output dim
//! 28      8   u64     n_theta
//! 36      8*n f64     theta
//! ..      8   u64     stats count
//! ..      8   u64     stats dim
//! ..      8*d f64     stats mean
//! ..      8*d f64     stats m2
//! ..      4   u32     CRC-32 (IEEE) of every preceding byte
//! ```

use super::{PolicyArch, PolicyParams, RunningStats};
use crate::error::{Error, LoadError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SAFESHED";
pub const FORMAT_VERSION: u32 = 1;

const ARCH_LINEAR: u32 = 0;
const ARCH_LSTM: u32 = 1;

pub fn serialize(params: &PolicyParams, stats: &RunningStats) -> Vec<u8> {
    let theta = params.theta();
    let mut out = Vec::with_capacity(48 + 8 * (theta.len() + 2 * stats.dim()));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let (tag, hidden) = match params.arch {
        PolicyArch::Linear => (ARCH_LINEAR, 0),
        PolicyArch::Lstm { hidden_size } => (ARCH_LSTM, hidden_size as u32),
    };
    for v in [tag, hidden, params.input_dim as u32, params.output_dim as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(theta.len() as u64).to_le_bytes());
    theta.iter().for_each(|w| out.extend_from_slice(&w.to_le_bytes()));
    out.extend_from_slice(&stats.count.to_le_bytes());
    out.extend_from_slice(&(stats.dim() as u64).to_le_bytes());
    stats.mean.iter().chain(&stats.m2).for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LoadError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(LoadError::Truncated {
            needed: self.pos.saturating_add(n),
            available: self.buf.len(),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, LoadError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, LoadError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize, LoadError> {
        let n = self.u64()?;
        // Any length the remaining bytes cannot hold is a truncation.
        let remaining = (self.buf.len() - self.pos) as u64;
        if n > remaining / 8 {
            return Err(LoadError::Truncated {
                needed: self.pos.saturating_add(n.saturating_mul(8).min(usize::MAX as u64) as usize),
                available: self.buf.len(),
            });
        }
        Ok(n as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, LoadError> {
        Ok(self.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Decode a checkpoint produced by [`serialize`].
pub fn deserialize(bytes: &[u8]) -> Result<(PolicyParams, RunningStats)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(LoadError::BadMagic.into());
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(LoadError::Version { found: version, expected: FORMAT_VERSION }.into());
    }
    // Verify the trailer before trusting any length field further.
    if bytes.len() < 12 + 4 {
        return Err(LoadError::Truncated { needed: 16, available: bytes.len() }.into());
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        // A short buffer usually means truncation rather than bit rot.
        let min_len = 36 + 16 + 4;
        if bytes.len() < min_len {
            return Err(LoadError::Truncated { needed: min_len, available: bytes.len() }.into());
        }
        return Err(LoadError::Checksum { stored, computed }.into());
    }
    let mut r = Reader { buf: body, pos: 12 };
    let tag = r.u32()?;
    let hidden = r.u32()? as usize;
    let input_dim = r.u32()? as usize;
    let output_dim = r.u32()? as usize;
    let arch = match tag {
        ARCH_LINEAR => PolicyArch::Linear,
        ARCH_LSTM => PolicyArch::Lstm { hidden_size: hidden },
        other => return Err(LoadError::UnknownArch(other).into()),
    };
    let n_theta = r.len()?;
    let theta = r.f64s(n_theta)?;
    let count = r.u64()?;
    let dim = r.len()?;
    let mean = r.f64s(dim)?;
    let m2 = r.f64s(dim)?;
    if r.pos != body.len() {
        return Err(LoadError::Inconsistent(format!("{} trailing bytes", body.len() - r.pos)).into());
    }
    if dim != input_dim {
        return Err(LoadError::Inconsistent(format!("stats dim {dim} != policy input dim {input_dim}")).into());
    }
    let params = PolicyParams::new(arch, input_dim, output_dim, theta).map_err(|e| match e {
        Error::Load(l) => l,
        other => LoadError::Inconsistent(other.to_string()),
    })?;
    Ok((params, RunningStats { count, mean, m2 }))
}

/// [`deserialize`], additionally requiring a particular architecture.
pub fn deserialize_expecting(bytes: &[u8], expected: PolicyArch) -> Result<(PolicyParams, RunningStats)> {
    let (params, stats) = deserialize(bytes)?;
    if params.arch != expected {
        return Err(LoadError::ArchMismatch { found: params.arch.to_string(), expected: expected.to_string() }.into());
    }
    Ok((params, stats))
}
