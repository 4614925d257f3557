//! Deterministic desk-scale simulator and audit toolkit for a hierarchical
//! blockchain e-voting system.
//!
//! Voting centers mine one block per vote at level 0. On a fixed interval the
//! centers of a cluster pause, ship their new blocks upward, and a
//! round-robin proposer folds them into a batch block on the cluster chain
//! once a delegate quorum approves. A mock e-government registry handles
//! authentication, double-vote prevention, and disaster reassignment. The
//! whole election runs as a seeded discrete-event simulation, and every chain
//! can be exported and re-audited by a third party with nothing but the
//! public election parameters.

pub mod audit;
pub mod block;
pub mod chain;
pub mod codec;
pub mod config;
pub mod hash;
pub mod mining;
pub mod node;
pub mod registry;
pub mod sim;
pub mod sync;
pub mod tally;

pub use block::{BatchBlock, Block, GenesisBlock, VoteBlock, BLANK_CANDIDATE};
pub use chain::{Chain, ChainError, LevelPatterns, ValidationFailure};
pub use hash::{DifficultyPattern, HashDigest};
