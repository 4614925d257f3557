//! Block types and their canonical hash pre-images.
//!
//! Three kinds of blocks exist. A synthetic genesis block starts every chain.
//! Level-0 chains hold one `VoteBlock` per cast vote (candidate and ballot
//! box only, never any voter identity). Chains at level 1 and above hold
//! `BatchBlock`s whose `lotb` field carries the child blocks committed by one
//! synchronization round.
//!
//! Every block hashes to SHA-256 of a canonical byte string:
//!
//! ```text
//! genesis  G|election_id|level
//! vote     V|election_id|ballot_box_id|candidate_id|prev_hash_hex|nonce
//! batch    B|election_id|level|round|prev_hash_hex|child1,child2,...|nonce-or-empty
//! ```
//!
//! The batch pre-image covers child *hashes*, so hashing an upper-level block
//! is linear in its number of children while `lotb` retains the full child
//! blocks for audit. Field values may not contain the `|` or `,` delimiters;
//! constructors reject them, which keeps the pre-image injective.

use std::sync::Arc;

use crate::chain::ChainError;
use crate::hash::{sha256, HashDigest};

/// Reserved candidate id for an explicit abstention.
pub const BLANK_CANDIDATE: &str = "BLANK";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenesisBlock {
    election_id: String,
    level: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoteBlock {
    election_id: String,
    ballot_box_id: String,
    candidate_id: String,
    prev_hash: HashDigest,
    nonce: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchBlock {
    election_id: String,
    level: u32,
    round: u64,
    prev_hash: HashDigest,
    lotb: Vec<Arc<Block>>,
    nonce: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Block {
    Genesis(GenesisBlock),
    Vote(VoteBlock),
    Batch(BatchBlock),
}

/// Rejects field values that would collide with the pre-image delimiters.
pub(crate) fn check_field(name: &'static str, value: &str) -> Result<(), ChainError> {
    if value.contains('|') || value.contains(',') {
        return Err(ChainError::IllegalCharacter { field: name });
    }
    Ok(())
}

impl GenesisBlock {
    pub fn new(election_id: impl Into<String>, level: u32) -> Result<Self, ChainError> {
        let election_id = election_id.into();
        check_field("election_id", &election_id)?;
        Ok(GenesisBlock { election_id, level })
    }

    pub fn election_id(&self) -> &str {
        &self.election_id
    }

    pub fn level(&self) -> u32 {
        self.level
    }
}

impl VoteBlock {
    pub fn new(
        election_id: impl Into<String>,
        ballot_box_id: impl Into<String>,
        candidate_id: impl Into<String>,
        prev_hash: HashDigest,
        nonce: impl Into<String>,
    ) -> Result<Self, ChainError> {
        let block = VoteBlock {
            election_id: election_id.into(),
            ballot_box_id: ballot_box_id.into(),
            candidate_id: candidate_id.into(),
            prev_hash,
            nonce: nonce.into(),
        };
        check_field("election_id", &block.election_id)?;
        check_field("ballot_box_id", &block.ballot_box_id)?;
        check_field("candidate_id", &block.candidate_id)?;
        check_field("nonce", &block.nonce)?;
        Ok(block)
    }

    pub fn election_id(&self) -> &str {
        &self.election_id
    }

    pub fn ballot_box_id(&self) -> &str {
        &self.ballot_box_id
    }

    pub fn candidate_id(&self) -> &str {
        &self.candidate_id
    }

    pub fn prev_hash(&self) -> &HashDigest {
        &self.prev_hash
    }

    pub fn nonce(&self) -> &str {
        &self.nonce
    }

    /// Pre-image prefix of a draft vote up to and including the final
    /// delimiter; mining appends candidate nonces to this.
    pub fn mining_prefix(
        election_id: &str,
        ballot_box_id: &str,
        candidate_id: &str,
        prev_hash: &HashDigest,
    ) -> Vec<u8> {
        format!(
            "V|{}|{}|{}|{}|",
            election_id,
            ballot_box_id,
            candidate_id,
            prev_hash.to_hex()
        )
        .into_bytes()
    }
}

impl BatchBlock {
    pub fn new(
        election_id: impl Into<String>,
        level: u32,
        round: u64,
        prev_hash: HashDigest,
        lotb: Vec<Arc<Block>>,
        nonce: Option<String>,
    ) -> Result<Self, ChainError> {
        let election_id = election_id.into();
        check_field("election_id", &election_id)?;
        if let Some(n) = &nonce {
            check_field("nonce", n)?;
        }
        if level == 0 {
            return Err(ChainError::LevelMismatch {
                expected: 1,
                found: 0,
            });
        }
        for child in &lotb {
            check_batch_child(&election_id, level, child)?;
        }
        Ok(BatchBlock {
            election_id,
            level,
            round,
            prev_hash,
            lotb,
            nonce,
        })
    }

    pub fn election_id(&self) -> &str {
        &self.election_id
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn prev_hash(&self) -> &HashDigest {
        &self.prev_hash
    }

    pub fn lotb(&self) -> &[Arc<Block>] {
        &self.lotb
    }

    pub fn nonce(&self) -> Option<&str> {
        self.nonce.as_deref()
    }

    pub(crate) fn mining_prefix(
        election_id: &str,
        level: u32,
        round: u64,
        prev_hash: &HashDigest,
        lotb: &[Arc<Block>],
    ) -> Vec<u8> {
        let mut s = format!(
            "B|{}|{}|{}|{}|",
            election_id,
            level,
            round,
            prev_hash.to_hex()
        );
        for (i, child) in lotb.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            s.push_str(&child.hash().to_hex());
        }
        s.push('|');
        s.into_bytes()
    }
}

/// A batch at level 1 holds vote blocks; a batch at level k >= 2 holds batch
/// blocks of level k-1. All children must belong to the same election.
fn check_batch_child(election_id: &str, level: u32, child: &Block) -> Result<(), ChainError> {
    match child {
        Block::Vote(v) => {
            if level != 1 {
                return Err(ChainError::LevelMismatch {
                    expected: level - 1,
                    found: 0,
                });
            }
            if v.election_id() != election_id {
                return Err(ChainError::ElectionMismatch);
            }
        }
        Block::Batch(b) => {
            if b.level() != level - 1 {
                return Err(ChainError::LevelMismatch {
                    expected: level - 1,
                    found: b.level(),
                });
            }
            if b.election_id() != election_id {
                return Err(ChainError::ElectionMismatch);
            }
        }
        Block::Genesis(_) => {
            return Err(ChainError::LevelMismatch {
                expected: level - 1,
                found: 0,
            })
        }
    }
    Ok(())
}

impl Block {
    pub fn election_id(&self) -> &str {
        match self {
            Block::Genesis(g) => g.election_id(),
            Block::Vote(v) => v.election_id(),
            Block::Batch(b) => b.election_id(),
        }
    }

    /// Canonical hash pre-image. Deterministic and injective per block kind
    /// because constructors forbid delimiter characters in field values.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        match self {
            Block::Genesis(g) => format!("G|{}|{}", g.election_id, g.level).into_bytes(),
            Block::Vote(v) => {
                let mut bytes = VoteBlock::mining_prefix(
                    &v.election_id,
                    &v.ballot_box_id,
                    &v.candidate_id,
                    &v.prev_hash,
                );
                bytes.extend_from_slice(v.nonce.as_bytes());
                bytes
            }
            Block::Batch(b) => {
                let mut bytes = BatchBlock::mining_prefix(
                    &b.election_id,
                    b.level,
                    b.round,
                    &b.prev_hash,
                    &b.lotb,
                );
                if let Some(n) = &b.nonce {
                    bytes.extend_from_slice(n.as_bytes());
                }
                bytes
            }
        }
    }

    /// SHA-256 of the canonical pre-image. Pure and stable across runs and
    /// platforms.
    pub fn hash(&self) -> HashDigest {
        sha256(&self.canonical_bytes())
    }

    pub fn prev_hash(&self) -> Option<&HashDigest> {
        match self {
            Block::Genesis(_) => None,
            Block::Vote(v) => Some(&v.prev_hash),
            Block::Batch(b) => Some(&b.prev_hash),
        }
    }

    pub fn as_vote(&self) -> Option<&VoteBlock> {
        match self {
            Block::Vote(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_batch(&self) -> Option<&BatchBlock> {
        match self {
            Block::Batch(b) => Some(b),
            _ => None,
        }
    }
}
