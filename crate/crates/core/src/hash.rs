//! SHA-256 digests and the leading-zero-bits difficulty pattern.

use std::fmt;

use sha2::{Digest, Sha256};

/// A 32-byte SHA-256 digest. Rendered as 64 lowercase hex characters wherever
/// it is serialized.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HashDigest([u8; 32]);

impl HashDigest {
    pub const LEN: usize = 32;

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        HashDigest(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(64);
        for b in self.0 {
            s.push(HEX_DIGITS[(b >> 4) as usize] as char);
            s.push(HEX_DIGITS[(b & 0x0f) as usize] as char);
        }
        s
    }

    /// Parses exactly 64 lowercase hex characters. Uppercase digits are
    /// rejected so that a digest has a single valid rendering.
    pub fn from_hex(s: &str) -> Result<Self, HexError> {
        let bytes = s.as_bytes();
        if bytes.len() != 64 {
            return Err(HexError::BadLength(bytes.len()));
        }
        let mut out = [0u8; 32];
        for (i, pair) in bytes.chunks_exact(2).enumerate() {
            out[i] = (decode_nibble(pair[0])? << 4) | decode_nibble(pair[1])?;
        }
        Ok(HashDigest(out))
    }

    /// Number of leading zero bits, capped at 256.
    pub fn leading_zero_bits(&self) -> u32 {
        let mut count = 0;
        for b in self.0 {
            if b == 0 {
                count += 8;
            } else {
                count += b.leading_zeros();
                break;
            }
        }
        count
    }
}

impl fmt::Display for HashDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for HashDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HashDigest({})", self.to_hex())
    }
}

const HEX_DIGITS: &[u8; 16] = b"0123456789abcdef";

fn decode_nibble(c: u8) -> Result<u8, HexError> {
    match c {
        b'0'..=b'9' => Ok(c - b'0'),
        b'a'..=b'f' => Ok(c - b'a' + 10),
        _ => Err(HexError::BadDigit(c as char)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HexError {
    #[error("expected 64 hex characters, got {0}")]
    BadLength(usize),
    #[error("invalid hex digit {0:?} (lowercase hex required)")]
    BadDigit(char),
}

/// SHA-256 over raw bytes.
pub fn sha256(data: &[u8]) -> HashDigest {
    let mut hasher = Sha256::new();
    hasher.update(data);
    HashDigest(hasher.finalize().into())
}

/// Difficulty requirement for mined blocks: the digest must start with
/// `zero_bits` zero bits. `zero_bits = 0` accepts everything.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DifficultyPattern {
    zero_bits: u32,
}

impl DifficultyPattern {
    pub fn new(zero_bits: u32) -> Self {
        DifficultyPattern { zero_bits }
    }

    pub fn zero_bits(&self) -> u32 {
        self.zero_bits
    }

    pub fn is_trivial(&self) -> bool {
        self.zero_bits == 0
    }

    /// True iff the first `zero_bits` bits of `digest` are zero.
    pub fn matches(&self, digest: &HashDigest) -> bool {
        digest.leading_zero_bits() >= self.zero_bits
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_round_trips() {
        let d = sha256(b"round trip");
        let hex = d.to_hex();
        assert_eq!(hex.len(), 64);
        assert_eq!(HashDigest::from_hex(&hex).unwrap(), d);
    }

    #[test]
    fn hex_rejects_uppercase_and_bad_lengths() {
        let d = sha256(b"x").to_hex();
        let upper = d.to_uppercase();
        assert!(matches!(
            HashDigest::from_hex(&upper),
            Err(HexError::BadDigit(_))
        ));
        assert!(matches!(
            HashDigest::from_hex(&d[..63]),
            Err(HexError::BadLength(63))
        ));
        assert!(HashDigest::from_hex("zz").is_err());
    }

    #[test]
    fn zero_bits_zero_accepts_everything() {
        let p = DifficultyPattern::new(0);
        assert!(p.matches(&sha256(b"anything")));
        assert!(p.matches(&HashDigest::from_bytes([0xff; 32])));
    }

    #[test]
    fn eight_bit_pattern_needs_a_zero_leading_byte() {
        let p = DifficultyPattern::new(8);
        let mut bytes = [0u8; 32];
        bytes[0] = 0x00;
        bytes[1] = 0xff;
        assert!(p.matches(&HashDigest::from_bytes(bytes)));
        // 0x0f has only 4 leading zero bits, which fails an 8-bit requirement.
        bytes[0] = 0x0f;
        assert!(!p.matches(&HashDigest::from_bytes(bytes)));
    }

    #[test]
    fn monotone_difficulty() {
        // A digest matching k zero bits matches every k' <= k.
        let d = HashDigest::from_bytes({
            let mut b = [0u8; 32];
            b[1] = 0x40; // 9 leading zero bits
            b
        });
        assert_eq!(d.leading_zero_bits(), 9);
        for k in 0..=9 {
            assert!(DifficultyPattern::new(k).matches(&d));
        }
        assert!(!DifficultyPattern::new(10).matches(&d));
    }

    #[test]
    fn sha256_known_answer() {
        // SHA-256 of the empty string, from an independent implementation.
        assert_eq!(
            sha256(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
