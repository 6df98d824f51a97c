//! Stable content digests for provenance fields.

use alloc::string::String;
use core::fmt::Write;

use sha2::{Digest, Sha256};

/// Incremental SHA-256 over little-endian encodings of numbers.
#[derive(Clone, Default)]
pub struct DigestBuilder {
    hasher: Sha256,
}

impl DigestBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn f64(&mut self, x: f64) -> &mut Self {
        self.hasher.update(x.to_bits().to_le_bytes());
        self
    }

    pub fn u64(&mut self, x: u64) -> &mut Self {
        self.hasher.update(x.to_le_bytes());
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u64(b.len() as u64);
        self.hasher.update(b);
        self
    }

    /// Lowercase hex, truncated to `len` characters (at most 64).
    pub fn finish_hex(self, len: usize) -> String {
        to_hex(&self.hasher.finalize(), len)
    }
}

pub fn to_hex(bytes: &[u8], len: usize) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s.truncate(len);
    s
}

/// Digest of an ordered list of `(x, y)` points.
pub fn digest_points(points: &[(f64, f64)]) -> String {
    let mut d = DigestBuilder::new();
    d.u64(points.len() as u64);
    for &(x, y) in points {
        d.f64(x).f64(y);
    }
    d.finish_hex(16)
}

/// SHA-256 of raw bytes, full 64 hex characters.
pub fn sha256_hex(bytes: &[u8]) -> String {
    to_hex(&Sha256::digest(bytes), 64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_digest_is_order_sensitive() {
        let a = digest_points(&[(1.0, 2.0), (3.0, 4.0)]);
        let b = digest_points(&[(3.0, 4.0), (1.0, 2.0)]);
        assert_ne!(a, b);
        assert_eq!(a, digest_points(&[(1.0, 2.0), (3.0, 4.0)]));
        assert_eq!(a.len(), 16);
    }

    #[test]
    fn known_sha256() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
