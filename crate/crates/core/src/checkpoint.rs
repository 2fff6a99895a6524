//! Binary parameter-checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  b"BVLM"
//! version u32      currently 1
//! count   u32      number of named tensors
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   rank     u32, extents u32 * rank
//!   payload  f64 * product(extents), little-endian
//! ```
//!
//! Tensors are written in sorted-name order, so encoding is deterministic
//! and `encode(decode(bytes)) == bytes` for any valid container.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{ParamSet, Tensor};

pub const MAGIC: [u8; 4] = *b"BVLM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CheckpointError {
    BadMagic,
    UnsupportedVersion(u32),
    Truncated,
    BadName,
}

impl core::fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CheckpointError::BadMagic => write!(f, "not a parameter checkpoint (bad magic)"),
            CheckpointError::UnsupportedVersion(v) => {
                write!(f, "unsupported checkpoint version {v}")
            }
            CheckpointError::Truncated => write!(f, "checkpoint payload is truncated"),
            CheckpointError::BadName => write!(f, "checkpoint contains a non-UTF-8 tensor name"),
        }
    }
}

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamSet, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = r.u32()?;
    let mut out = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::BadName)?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        for v in data.iter_mut() {
            *v = r.f64()?;
        }
        out.insert(&name, Tensor::new(&shape, data));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn sample_params() -> ParamSet {
        let mut rng = SplitMix64::new(123);
        let mut ps = ParamSet::new();
        ps.insert("layer.w", crate::tensor::test_support::rand_tensor(&mut rng, &[3, 4]));
        ps.insert("layer.b", crate::tensor::test_support::rand_tensor(&mut rng, &[4]));
        ps.insert("scalar", Tensor::scalar(-0.5));
        ps
    }

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let ps = sample_params();
        let bytes = encode(&ps);
        let back = decode(&bytes).unwrap();
        assert_eq!(ps.digest(), back.digest());
        assert_eq!(encode(&back), bytes, "re-encode must be byte-identical");
        for (name, t) in ps.iter() {
            let u = back.get(name);
            assert_eq!(t.shape, u.shape);
            assert_eq!(t.data, u.data);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode(&sample_params());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn rejects_wrong_version() {
        let mut bytes = encode(&sample_params());
        bytes[4] = 99;
        assert!(matches!(decode(&bytes), Err(CheckpointError::UnsupportedVersion(99))));
    }

    #[test]
    fn rejects_truncation() {
        let bytes = encode(&sample_params());
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode(cut), Err(CheckpointError::Truncated)));
    }

    #[test]
    fn empty_set_roundtrips() {
        let ps = ParamSet::new();
        assert_eq!(decode(&encode(&ps)).unwrap().len(), 0);
    }
}
