//! Content digests for parameter sets and config payloads.
//!
//! FNV-1a (64-bit) over little-endian byte streams: not cryptographic, but
//! stable, dependency-free, and more than enough to detect that a frozen
//! parameter set changed or that two configs differ.

use alloc::string::String;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x100_0000_01b3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Digest(pub u64);

impl Digest {
    pub fn to_hex(self) -> String {
        use core::fmt::Write;
        let mut s = String::new();
        let _ = write!(s, "{:016x}", self.0);
        s
    }
}

#[derive(Clone, Debug)]
pub struct Hasher {
    state: u64,
}

impl Default for Hasher {
    fn default() -> Self {
        Self::new()
    }
}

impl Hasher {
    pub fn new() -> Self {
        Hasher { state: FNV_OFFSET }
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.state ^= b as u64;
            self.state = self.state.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn update_f64(&mut self, x: f64) {
        self.update(&x.to_le_bytes());
    }

    pub fn update_u64(&mut self, x: u64) {
        self.update(&x.to_le_bytes());
    }

    pub fn update_str(&mut self, s: &str) {
        self.update_u64(s.len() as u64);
        self.update(s.as_bytes());
    }

    pub fn finish(&self) -> Digest {
        Digest(self.state)
    }
}

pub fn digest_bytes(bytes: &[u8]) -> Digest {
    let mut h = Hasher::new();
    h.update(bytes);
    h.finish()
}

pub fn digest_str(s: &str) -> Digest {
    digest_bytes(s.as_bytes())
}
