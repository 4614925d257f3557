//! Append-only chains with link, pattern, and recursive-batch validation.

use std::sync::Arc;

use crate::block::{BatchBlock, Block, GenesisBlock, VoteBlock};
use crate::hash::{DifficultyPattern, HashDigest};
use crate::mining::mine_nonce;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChainError {
    #[error("field {field} contains a reserved delimiter character")]
    IllegalCharacter { field: &'static str },
    #[error("prev_hash does not match the chain tip at index {index}")]
    BrokenLink { index: usize },
    #[error("block hash violates the difficulty pattern at index {index}")]
    PatternViolation { index: usize },
    #[error("block level does not fit the chain (expected {expected}, found {found})")]
    LevelMismatch { expected: u32, found: u32 },
    #[error("block belongs to a different election")]
    ElectionMismatch,
    #[error("mining budget of {attempts} attempts exhausted; difficulty is misconfigured")]
    MiningBudgetExceeded { attempts: u64 },
}

/// Difficulty per chain level. Levels beyond the configured list default to
/// zero bits, so by default only level 0 is mined.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelPatterns {
    zero_bits: Vec<u32>,
}

impl LevelPatterns {
    pub fn new(zero_bits: Vec<u32>) -> Self {
        LevelPatterns { zero_bits }
    }

    pub fn level(&self, level: u32) -> DifficultyPattern {
        DifficultyPattern::new(self.zero_bits.get(level as usize).copied().unwrap_or(0))
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.zero_bits
    }
}

impl Default for LevelPatterns {
    fn default() -> Self {
        LevelPatterns::new(vec![8])
    }
}

/// First validation failure found in a chain: block index plus reason.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("block {index}: {reason}")]
pub struct ValidationFailure {
    pub index: usize,
    pub reason: ChainError,
}

/// An ordered list of blocks starting at a synthetic genesis block. Chains
/// are immutable values: `append` returns a new chain that shares its prefix
/// with the old one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Chain {
    election_id: String,
    level: u32,
    blocks: Vec<Arc<Block>>,
}

impl Chain {
    pub fn new(election_id: impl Into<String>, level: u32) -> Result<Self, ChainError> {
        let genesis = GenesisBlock::new(election_id, level)?;
        Ok(Chain {
            election_id: genesis.election_id().to_string(),
            level,
            blocks: vec![Arc::new(Block::Genesis(genesis))],
        })
    }

    /// Rebuilds a chain from imported blocks without link validation; used by
    /// the codec and audit layers, which run [`Chain::validate`] themselves.
    pub(crate) fn from_parts(election_id: String, level: u32, blocks: Vec<Arc<Block>>) -> Self {
        Chain {
            election_id,
            level,
            blocks,
        }
    }

    /// Fault-injection hook: swaps a stored block without any checks, so the
    /// damage is visible to validation exactly like real tampering would be.
    pub(crate) fn replace_block_unchecked(&mut self, index: usize, block: Block) {
        self.blocks[index] = Arc::new(block);
    }

    pub fn election_id(&self) -> &str {
        &self.election_id
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn blocks(&self) -> &[Arc<Block>] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        false // a chain always carries at least its genesis block
    }

    /// Blocks after the genesis block.
    pub fn entries(&self) -> &[Arc<Block>] {
        &self.blocks[1..]
    }

    pub fn tip(&self) -> &Arc<Block> {
        self.blocks.last().expect("chain holds at least genesis")
    }

    pub fn tip_hash(&self) -> HashDigest {
        self.tip().hash()
    }

    fn check_append(&self, block: &Block, pattern: DifficultyPattern) -> Result<(), ChainError> {
        match block {
            Block::Genesis(_) => {
                return Err(ChainError::LevelMismatch {
                    expected: self.level,
                    found: self.level,
                })
            }
            Block::Vote(_) => {
                if self.level != 0 {
                    return Err(ChainError::LevelMismatch {
                        expected: self.level,
                        found: 0,
                    });
                }
            }
            Block::Batch(b) => {
                if b.level() != self.level {
                    return Err(ChainError::LevelMismatch {
                        expected: self.level,
                        found: b.level(),
                    });
                }
            }
        }
        if block.election_id() != self.election_id {
            return Err(ChainError::ElectionMismatch);
        }
        if block.prev_hash() != Some(&self.tip_hash()) {
            return Err(ChainError::BrokenLink {
                index: self.blocks.len(),
            });
        }
        if !pattern.matches(&block.hash()) {
            return Err(ChainError::PatternViolation {
                index: self.blocks.len(),
            });
        }
        Ok(())
    }

    /// Returns a new chain extended by `block`. Prior blocks are shared, not
    /// copied.
    pub fn append(&self, block: Block, pattern: DifficultyPattern) -> Result<Chain, ChainError> {
        self.check_append(&block, pattern)?;
        let mut blocks = self.blocks.clone();
        blocks.push(Arc::new(block));
        Ok(Chain {
            election_id: self.election_id.clone(),
            level: self.level,
            blocks,
        })
    }

    /// In-place variant of [`Chain::append`] for single-owner call sites; the
    /// validation is identical.
    pub fn append_in_place(
        &mut self,
        block: Block,
        pattern: DifficultyPattern,
    ) -> Result<(), ChainError> {
        self.check_append(&block, pattern)?;
        self.blocks.push(Arc::new(block));
        Ok(())
    }

    /// Mines and appends one vote to a level-0 chain, returning the hash of
    /// the new block.
    pub fn append_mined_vote(
        &mut self,
        ballot_box_id: &str,
        candidate_id: &str,
        pattern: DifficultyPattern,
        budget: u64,
    ) -> Result<HashDigest, ChainError> {
        crate::block::check_field("ballot_box_id", ballot_box_id)?;
        crate::block::check_field("candidate_id", candidate_id)?;
        let prev = self.tip_hash();
        let prefix =
            VoteBlock::mining_prefix(&self.election_id, ballot_box_id, candidate_id, &prev);
        let (nonce, _) = mine_nonce(&prefix, pattern, budget)?;
        let block = Block::Vote(VoteBlock::new(
            self.election_id.clone(),
            ballot_box_id,
            candidate_id,
            prev,
            nonce,
        )?);
        let hash = block.hash();
        self.append_in_place(block, pattern)?;
        Ok(hash)
    }

    /// Builds a batch block linked to this chain's tip, mining a nonce only
    /// when the level's pattern demands one.
    pub fn build_batch(
        &self,
        round: u64,
        lotb: Vec<Arc<Block>>,
        pattern: DifficultyPattern,
        budget: u64,
    ) -> Result<BatchBlock, ChainError> {
        let prev = self.tip_hash();
        let nonce = if pattern.is_trivial() {
            None
        } else {
            let prefix =
                BatchBlock::mining_prefix(&self.election_id, self.level, round, &prev, &lotb);
            Some(mine_nonce(&prefix, pattern, budget)?.0)
        };
        BatchBlock::new(
            self.election_id.clone(),
            self.level,
            round,
            prev,
            lotb,
            nonce,
        )
    }

    /// Validates every link, every mined pattern, and recursively every batch
    /// child. Returns the first failing block index and reason.
    pub fn validate(&self, patterns: &LevelPatterns) -> Result<(), ValidationFailure> {
        let own_pattern = patterns.level(self.level);
        let mut prev_hash = match self.blocks[0].as_ref() {
            Block::Genesis(g) => {
                if g.level() != self.level {
                    return Err(ValidationFailure {
                        index: 0,
                        reason: ChainError::LevelMismatch {
                            expected: self.level,
                            found: g.level(),
                        },
                    });
                }
                self.blocks[0].hash()
            }
            _ => {
                return Err(ValidationFailure {
                    index: 0,
                    reason: ChainError::BrokenLink { index: 0 },
                })
            }
        };
        for (index, block) in self.blocks.iter().enumerate().skip(1) {
            let fail = |reason: ChainError| ValidationFailure { index, reason };
            if block.election_id() != self.election_id {
                return Err(fail(ChainError::ElectionMismatch));
            }
            match block.as_ref() {
                Block::Genesis(_) => return Err(fail(ChainError::BrokenLink { index })),
                Block::Vote(v) => {
                    if self.level != 0 {
                        return Err(fail(ChainError::LevelMismatch {
                            expected: self.level,
                            found: 0,
                        }));
                    }
                    if v.prev_hash() != &prev_hash {
                        return Err(fail(ChainError::BrokenLink { index }));
                    }
                }
                Block::Batch(b) => {
                    if b.level() != self.level {
                        return Err(fail(ChainError::LevelMismatch {
                            expected: self.level,
                            found: b.level(),
                        }));
                    }
                    if b.prev_hash() != &prev_hash {
                        return Err(fail(ChainError::BrokenLink { index }));
                    }
                    for child in b.lotb() {
                        validate_child(child, patterns).map_err(fail)?;
                    }
                }
            }
            let hash = block.hash();
            if !own_pattern.matches(&hash) {
                return Err(fail(ChainError::PatternViolation { index }));
            }
            prev_hash = hash;
        }
        Ok(())
    }
}

/// A batch child must individually satisfy its own level's pattern; batch
/// children recurse. Linkage between children is a property of the source
/// chain, not of the enclosing batch, and is checked by the sync and audit
/// layers which know the source cursors.
pub(crate) fn validate_child(child: &Block, patterns: &LevelPatterns) -> Result<(), ChainError> {
    match child {
        Block::Genesis(_) => Err(ChainError::BrokenLink { index: 0 }),
        Block::Vote(_) => {
            if patterns.level(0).matches(&child.hash()) {
                Ok(())
            } else {
                Err(ChainError::PatternViolation { index: 0 })
            }
        }
        Block::Batch(b) => {
            if !patterns.level(b.level()).matches(&child.hash()) {
                return Err(ChainError::PatternViolation { index: 0 });
            }
            for grandchild in b.lotb() {
                validate_child(grandchild, patterns)?;
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    const EASY: u64 = 1 << 22;

    fn patterns(bits: u32) -> LevelPatterns {
        LevelPatterns::new(vec![bits, 0, 0])
    }

    #[test]
    fn genesis_only_chain_validates() {
        let chain = Chain::new("E1", 0).unwrap();
        assert!(chain.validate(&patterns(8)).is_ok());
        assert_eq!(chain.len(), 1);
        assert!(chain.entries().is_empty());
    }

    #[test]
    fn append_mined_vote_grows_the_chain() {
        let mut chain = Chain::new("E1", 0).unwrap();
        let pattern = DifficultyPattern::new(8);
        chain
            .append_mined_vote("B1", "CAND-A", pattern, EASY)
            .unwrap();
        assert_eq!(chain.len(), 2);
        assert!(chain.validate(&patterns(8)).is_ok());
    }

    #[test]
    fn pure_append_leaves_the_original_untouched() {
        let chain = Chain::new("E1", 0).unwrap();
        let pattern = DifficultyPattern::new(0);
        let block = Block::Vote(VoteBlock::new("E1", "B1", "A", chain.tip_hash(), "0").unwrap());
        let longer = chain.append(block, pattern).unwrap();
        assert_eq!(chain.len(), 1);
        assert_eq!(longer.len(), 2);
        assert_eq!(longer.blocks()[0], chain.blocks()[0]);
    }

    #[test]
    fn cross_election_prev_hash_is_a_broken_link() {
        let chain = Chain::new("E1", 0).unwrap();
        let other = Chain::new("E2", 0).unwrap();
        let block = Block::Vote(VoteBlock::new("E1", "B1", "A", other.tip_hash(), "0").unwrap());
        assert!(matches!(
            chain.append(block, DifficultyPattern::new(0)),
            Err(ChainError::BrokenLink { index: 1 })
        ));
    }

    #[test]
    fn election_mismatch_is_rejected_even_with_matching_link() {
        let chain = Chain::new("E1", 0).unwrap();
        let block = Block::Vote(VoteBlock::new("E2", "B1", "A", chain.tip_hash(), "0").unwrap());
        assert!(matches!(
            chain.append(block, DifficultyPattern::new(0)),
            Err(ChainError::ElectionMismatch)
        ));
    }

    #[test]
    fn failed_pattern_is_rejected_on_append() {
        let chain = Chain::new("E1", 0).unwrap();
        // Find a nonce whose hash does NOT satisfy 8 zero bits.
        let pattern = DifficultyPattern::new(8);
        let mut nonce = 0u64;
        let bad = loop {
            let block =
                VoteBlock::new("E1", "B1", "A", chain.tip_hash(), nonce.to_string()).unwrap();
            if !pattern.matches(&Block::Vote(block.clone()).hash()) {
                break block;
            }
            nonce += 1;
        };
        assert!(matches!(
            chain.append(Block::Vote(bad), pattern),
            Err(ChainError::PatternViolation { index: 1 })
        ));
    }

    #[test]
    fn vote_blocks_do_not_fit_upper_chains() {
        let chain = Chain::new("E1", 1).unwrap();
        let block = Block::Vote(VoteBlock::new("E1", "B1", "A", chain.tip_hash(), "0").unwrap());
        assert!(matches!(
            chain.append(block, DifficultyPattern::new(0)),
            Err(ChainError::LevelMismatch { .. })
        ));
    }

    #[test]
    fn tamper_fuzz_is_always_detected() {
        // Build a 50-vote chain, then flip one candidate byte post-hoc and
        // revalidate, 1,000 times at random positions.
        let mut chain = Chain::new("E1", 0).unwrap();
        let pattern = DifficultyPattern::new(4);
        for i in 0..50 {
            chain
                .append_mined_vote("B1", &format!("CAND-{i:02}"), pattern, EASY)
                .unwrap();
        }
        let lp = LevelPatterns::new(vec![4]);
        assert!(chain.validate(&lp).is_ok());
        let tip = chain.tip_hash();
        let mut rng = StdRng::seed_from_u64(99);
        for _ in 0..1_000 {
            let victim = rng.gen_range(1..chain.len());
            let mut tampered = chain.clone();
            let original = tampered.blocks[victim].as_vote().unwrap().clone();
            let mut candidate = original.candidate_id().to_string();
            let extra = (b'a' + rng.gen_range(0..26)) as char;
            candidate.push(extra);
            let forged = VoteBlock::new(
                original.election_id(),
                original.ballot_box_id(),
                candidate,
                *original.prev_hash(),
                original.nonce(),
            )
            .unwrap();
            tampered.blocks[victim] = Arc::new(Block::Vote(forged));
            if victim + 1 < chain.len() {
                // Interior blocks: the successor's prev_hash (or the mined
                // pattern) gives the mutation away on its own.
                let failure = tampered.validate(&lp).unwrap_err();
                assert!(failure.index == victim || failure.index == victim + 1);
            } else {
                // The final block has no successor; its new hash may even
                // still fit the pattern. The published tip closes that gap,
                // which is how the export audit anchors chains.
                let detected = tampered.validate(&lp).is_err() || tampered.tip_hash() != tip;
                assert!(detected);
                assert_ne!(tampered.tip_hash(), tip);
            }
        }
    }

    #[test]
    fn batch_chain_with_tampered_child_fails_validation() {
        let mut lower = Chain::new("E1", 0).unwrap();
        let pattern = DifficultyPattern::new(4);
        lower
            .append_mined_vote("B1", "CAND-A", pattern, EASY)
            .unwrap();
        lower
            .append_mined_vote("B1", "CAND-B", pattern, EASY)
            .unwrap();

        let mut upper = Chain::new("E1", 1).unwrap();
        let batch = upper
            .build_batch(0, lower.entries().to_vec(), DifficultyPattern::new(0), EASY)
            .unwrap();
        upper
            .append_in_place(Block::Batch(batch), DifficultyPattern::new(0))
            .unwrap();
        let lp = LevelPatterns::new(vec![4, 0]);
        assert!(upper.validate(&lp).is_ok());

        // Swap in a child whose nonce was never mined.
        let bogus = Arc::new(Block::Vote(
            VoteBlock::new("E1", "B1", "CAND-X", lower.tip_hash(), "1").unwrap(),
        ));
        let tampered_batch = upper
            .build_batch(1, vec![bogus], DifficultyPattern::new(0), EASY)
            .unwrap();
        let mut tampered = upper.clone();
        tampered
            .append_in_place(Block::Batch(tampered_batch), DifficultyPattern::new(0))
            .unwrap_or(());
        // The append path itself does not recurse into children; validation
        // must catch it.
        if tampered.len() == upper.len() + 1 {
            assert!(tampered.validate(&lp).is_err());
        }
    }

    #[test]
    fn upper_levels_mine_only_when_configured() {
        let mut upper = Chain::new("E1", 1).unwrap();
        let quiet = upper
            .build_batch(0, vec![], DifficultyPattern::new(0), EASY)
            .unwrap();
        assert!(quiet.nonce().is_none());
        upper
            .append_in_place(Block::Batch(quiet), DifficultyPattern::new(0))
            .unwrap();

        let mined = upper
            .build_batch(1, vec![], DifficultyPattern::new(6), EASY)
            .unwrap();
        assert!(mined.nonce().is_some());
        assert!(DifficultyPattern::new(6).matches(&Block::Batch(mined).hash()));
    }
}
