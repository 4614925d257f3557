//! Nonce mining: vary the nonce string until the block hash fits the
//! difficulty pattern.
//!
//! The search is sequential from 0, so the returned nonce is the smallest
//! decimal integer that works and mining is deterministic across runs and
//! platforms.

use sha2::{Digest, Sha256};

use crate::chain::ChainError;
use crate::hash::{DifficultyPattern, HashDigest};

/// Attempt cap guarding against a misconfigured difficulty (2^26).
pub const DEFAULT_MINING_BUDGET: u64 = 1 << 26;

/// Finds the smallest nonce (tried as "0", "1", "2", ...) whose appended
/// pre-image hashes to a digest matching `pattern`.
///
/// `prefix` is the canonical pre-image up to and including the delimiter
/// before the nonce. Returns the winning nonce and the number of attempts it
/// took (the nonce value plus one).
pub fn mine_nonce(
    prefix: &[u8],
    pattern: DifficultyPattern,
    budget: u64,
) -> Result<(String, u64), ChainError> {
    let mut hasher_base = Sha256::new();
    hasher_base.update(prefix);
    let mut candidate = 0u64;
    let mut buf = itoa_buf();
    loop {
        if candidate >= budget {
            return Err(ChainError::MiningBudgetExceeded { attempts: budget });
        }
        let digits = write_decimal(&mut buf, candidate);
        let mut hasher = hasher_base.clone();
        hasher.update(digits);
        let digest = HashDigest::from_bytes(hasher.finalize().into());
        if pattern.matches(&digest) {
            return Ok((
                String::from_utf8(digits.to_vec()).expect("decimal digits are ASCII"),
                candidate + 1,
            ));
        }
        candidate += 1;
    }
}

fn itoa_buf() -> [u8; 20] {
    [0u8; 20]
}

fn write_decimal(buf: &mut [u8; 20], mut n: u64) -> &[u8] {
    let mut i = buf.len();
    loop {
        i -= 1;
        buf[i] = b'0' + (n % 10) as u8;
        n /= 10;
        if n == 0 {
            break;
        }
    }
    &buf[i..]
}
