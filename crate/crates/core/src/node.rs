//! Level-0 voting center: accepts casts, mines vote blocks, tracks the
//! accepted-count file, and honors sync pauses.
//!
//! One node serves exactly one ballot box. Casts at a node are serialized;
//! distinct nodes are independent.

use std::fs;
use std::path::{Path, PathBuf};

use crate::chain::{Chain, ChainError};
use crate::hash::{DifficultyPattern, HashDigest};
use crate::registry::{Credentials, Registry, RegistryError};
use crate::sync::{AckFlag, SyncAck, SyncError};
use crate::Block;

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error("voting is paused for synchronization")]
    VotingPaused,
    #[error("voting center is unavailable")]
    CenterUnavailable,
    #[error("candidate is not on this ballot")]
    InvalidCandidate,
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error("failed to persist accepted count: {0}")]
    Persist(String),
}

/// Debugging artifact returned by a successful cast. Never exported.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CastReceipt {
    pub block_hash: HashDigest,
}

pub struct VotingNode {
    node_id: String,
    ballot_box_id: String,
    chain: Chain,
    accepted_count: u64,
    paused: bool,
    available: bool,
    in_round: Option<u64>,
    pattern: DifficultyPattern,
    mining_budget: u64,
    count_path: Option<PathBuf>,
}

impl VotingNode {
    /// Node ids and ballot box ids coincide (one node per box).
    pub fn new(
        ballot_box_id: impl Into<String>,
        election_id: &str,
        pattern: DifficultyPattern,
        mining_budget: u64,
    ) -> Result<Self, ChainError> {
        let ballot_box_id = ballot_box_id.into();
        Ok(VotingNode {
            node_id: ballot_box_id.clone(),
            ballot_box_id,
            chain: Chain::new(election_id, 0)?,
            accepted_count: 0,
            paused: false,
            available: true,
            in_round: None,
            pattern,
            mining_budget,
            count_path: None,
        })
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    pub fn ballot_box_id(&self) -> &str {
        &self.ballot_box_id
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub(crate) fn chain_mut(&mut self) -> &mut Chain {
        &mut self.chain
    }

    pub fn accepted_count(&self) -> u64 {
        self.accepted_count
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    pub fn is_available(&self) -> bool {
        self.available
    }

    /// Routes the accepted-count file to `path` and persists the current
    /// value immediately.
    pub fn set_count_path(&mut self, path: PathBuf) -> Result<(), NodeError> {
        self.count_path = Some(path);
        self.persist_count()
    }

    fn persist_count(&self) -> Result<(), NodeError> {
        let Some(path) = &self.count_path else {
            return Ok(());
        };
        write_count_file(path, self.accepted_count)
            .map_err(|e| NodeError::Persist(format!("{}: {e}", path.display())))
    }

    /// Marks the center as damaged/unreachable for new casts. Its chain data
    /// survives and keeps flowing upward through synchronization.
    pub fn set_available(&mut self, available: bool) {
        self.available = available;
    }

    pub fn set_paused(&mut self, flag: bool) {
        self.paused = flag;
    }

    pub(crate) fn begin_round(&mut self, round: u64) {
        self.in_round = Some(round);
    }

    /// Authenticates the voter, mines a vote block onto the local chain, and
    /// only then marks the voter as voted. The block carries no voter
    /// identity of any kind.
    pub fn cast_vote(
        &mut self,
        registry: &Registry,
        credentials: &Credentials,
        candidate_choice: &str,
    ) -> Result<CastReceipt, NodeError> {
        if !self.available {
            return Err(NodeError::CenterUnavailable);
        }
        if self.paused {
            return Err(NodeError::VotingPaused);
        }
        if !registry
            .candidates()
            .is_valid_choice(&self.ballot_box_id, candidate_choice)?
        {
            return Err(NodeError::InvalidCandidate);
        }
        let token = registry.validate(credentials, &self.ballot_box_id)?;
        let mined = self.chain.append_mined_vote(
            &self.ballot_box_id,
            candidate_choice,
            self.pattern,
            self.mining_budget,
        );
        let block_hash = match mined {
            Ok(hash) => hash,
            Err(e) => {
                registry.cancel_token(&token);
                return Err(e.into());
            }
        };
        // The flag flips only after the block is committed locally: a crash
        // in between leaves an extra unflagged voter, never a lost vote.
        registry.mark_voted(&token)?;
        Ok(CastReceipt { block_hash })
    }

    /// Blocks not yet accepted by the upper level, in chain order.
    pub fn pending_batch(&self) -> Vec<std::sync::Arc<Block>> {
        self.chain.entries()[self.accepted_count as usize..].to_vec()
    }

    /// Applies the upper level's answer for the current round. Accept
    /// advances and persists the accepted count before the node resumes;
    /// decline leaves it untouched so the same batch is resent.
    pub fn apply_ack(&mut self, ack: &SyncAck) -> Result<(), SyncError> {
        match self.in_round {
            Some(round) if round == ack.round => {}
            _ => {
                return Err(SyncError::StaleAck {
                    expected: self.in_round,
                    got: ack.round,
                })
            }
        }
        if ack.flag == AckFlag::Accept {
            debug_assert!(
                self.accepted_count + ack.accepted_size <= self.chain.entries().len() as u64
            );
            self.accepted_count += ack.accepted_size;
            self.persist_count()
                .map_err(|e| SyncError::Persist(e.to_string()))?;
        }
        self.in_round = None;
        Ok(())
    }
}

/// Atomic write of the one-line decimal count file (write new, then rename).
pub fn write_count_file(path: &Path, count: u64) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, format!("{count}\n"))?;
    fs::rename(&tmp, path)
}

pub fn read_count_file(path: &Path) -> std::io::Result<u64> {
    let text = fs::read_to_string(path)?;
    text.trim_end_matches('\n')
        .parse()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{Candidate, CandidateRegistry};
    use crate::sync::{AckFlag, SyncAck};

    fn test_registry(boxes: &[&str]) -> Registry {
        let mut candidates = CandidateRegistry::new();
        for b in boxes {
            candidates
                .register_box(
                    *b,
                    vec![Candidate {
                        id: "A".into(),
                        display_name: "A".into(),
                    }],
                )
                .unwrap();
        }
        let registry = Registry::new(candidates, "salt");
        registry.enroll("VOTER-1", "pw", boxes[0]).unwrap();
        registry.enroll("VOTER-2", "pw", boxes[0]).unwrap();
        registry
    }

    fn test_node() -> VotingNode {
        VotingNode::new("BOX-0", "E1", DifficultyPattern::new(4), 1 << 22).unwrap()
    }

    #[test]
    fn successful_cast_grows_chain_and_flags_voter() {
        let registry = test_registry(&["BOX-0"]);
        let mut node = test_node();
        let receipt = node
            .cast_vote(&registry, &Credentials::new("VOTER-1", "pw"), "A")
            .unwrap();
        assert_eq!(node.chain().len(), 2);
        assert_eq!(receipt.block_hash, node.chain().tip_hash());
        assert_eq!(registry.voted_count(), 1);
        // Same voter again: rejected, chain unchanged.
        let err = node
            .cast_vote(&registry, &Credentials::new("VOTER-1", "pw"), "A")
            .unwrap_err();
        assert!(matches!(
            err,
            NodeError::Registry(RegistryError::AlreadyVoted)
        ));
        assert_eq!(node.chain().len(), 2);
    }

    #[test]
    fn paused_node_rejects_casts() {
        let registry = test_registry(&["BOX-0"]);
        let mut node = test_node();
        node.set_paused(true);
        node.set_paused(true); // idempotent
        let err = node
            .cast_vote(&registry, &Credentials::new("VOTER-1", "pw"), "A")
            .unwrap_err();
        assert!(matches!(err, NodeError::VotingPaused));
        assert_eq!(node.chain().len(), 1);
        assert_eq!(registry.voted_count(), 0);
        node.set_paused(false);
        node.cast_vote(&registry, &Credentials::new("VOTER-1", "pw"), "A")
            .unwrap();
    }

    #[test]
    fn invalid_candidate_never_touches_the_voter_flag() {
        let registry = test_registry(&["BOX-0"]);
        let mut node = test_node();
        let err = node
            .cast_vote(&registry, &Credentials::new("VOTER-1", "pw"), "ZZZ")
            .unwrap_err();
        assert!(matches!(err, NodeError::InvalidCandidate));
        assert_eq!(registry.voted_count(), 0);
        // Blank votes are always a valid choice.
        node.cast_vote(&registry, &Credentials::new("VOTER-1", "pw"), "BLANK")
            .unwrap();
    }

    #[test]
    fn pending_batch_tracks_the_accepted_cursor() {
        let registry = test_registry(&["BOX-0"]);
        let mut node = test_node();
        for voter in ["VOTER-1", "VOTER-2"] {
            node.cast_vote(&registry, &Credentials::new(voter, "pw"), "A")
                .unwrap();
        }
        assert_eq!(node.pending_batch().len(), 2);
        node.begin_round(0);
        node.apply_ack(&SyncAck {
            round: 0,
            flag: AckFlag::Accept,
            accepted_size: 2,
        })
        .unwrap();
        assert_eq!(node.accepted_count(), 2);
        assert!(node.pending_batch().is_empty());
    }

    #[test]
    fn decline_leaves_the_batch_identical() {
        let registry = test_registry(&["BOX-0"]);
        let mut node = test_node();
        node.cast_vote(&registry, &Credentials::new("VOTER-1", "pw"), "A")
            .unwrap();
        let before = node.pending_batch();
        node.begin_round(3);
        node.apply_ack(&SyncAck {
            round: 3,
            flag: AckFlag::Decline,
            accepted_size: 0,
        })
        .unwrap();
        assert_eq!(node.accepted_count(), 0);
        assert_eq!(node.pending_batch(), before);
    }

    #[test]
    fn stale_acks_are_rejected() {
        let mut node = test_node();
        node.begin_round(5);
        let err = node
            .apply_ack(&SyncAck {
                round: 3,
                flag: AckFlag::Accept,
                accepted_size: 1,
            })
            .unwrap_err();
        assert!(matches!(err, SyncError::StaleAck { .. }));
    }

    #[test]
    fn exhausted_mining_budget_releases_the_auth_token() {
        let registry = test_registry(&["BOX-0"]);
        let mut starved = VotingNode::new("BOX-0", "E1", DifficultyPattern::new(16), 2).unwrap();
        let err = starved
            .cast_vote(&registry, &Credentials::new("VOTER-1", "pw"), "A")
            .unwrap_err();
        assert!(matches!(
            err,
            NodeError::Chain(ChainError::MiningBudgetExceeded { .. })
        ));
        assert_eq!(starved.chain().len(), 1);
        assert_eq!(registry.voted_count(), 0);
        // The token was cancelled, so the voter can still vote elsewhere.
        let mut healthy = test_node();
        healthy
            .cast_vote(&registry, &Credentials::new("VOTER-1", "pw"), "A")
            .unwrap();
    }

    #[test]
    fn unavailable_center_refuses_casts() {
        let registry = test_registry(&["BOX-0"]);
        let mut node = test_node();
        node.set_available(false);
        let err = node
            .cast_vote(&registry, &Credentials::new("VOTER-1", "pw"), "A")
            .unwrap_err();
        assert!(matches!(err, NodeError::CenterUnavailable));
    }

    #[test]
    fn count_file_is_written_atomically_on_ack() {
        let registry = test_registry(&["BOX-0"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("BOX-0.count");
        let mut node = test_node();
        node.set_count_path(path.clone()).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "0\n");
        node.cast_vote(&registry, &Credentials::new("VOTER-1", "pw"), "A")
            .unwrap();
        node.begin_round(0);
        node.apply_ack(&SyncAck {
            round: 0,
            flag: AckFlag::Accept,
            accepted_size: 1,
        })
        .unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "1\n");
        assert_eq!(read_count_file(&path).unwrap(), 1);
        assert!(!path.with_extension("tmp").exists());
    }
}
