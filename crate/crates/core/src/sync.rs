//! Inter-level synchronization rounds and DPoS finalization.
//!
//! On each cycle the upper node pauses its lower nodes, collects their
//! pending batches, checks consistency, and lets a round-robin proposer build
//! a batch block. Delegates (all member nodes of the cluster chain)
//! independently re-verify the proposal; the block is finalized only when
//! strictly more than two thirds approve. Accept acks advance the lower
//! nodes' accepted counts; a decline makes them resend the identical batch in
//! a fresh round until the retry cap trips.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::block::{BatchBlock, Block, VoteBlock};
use crate::chain::{Chain, ChainError, LevelPatterns};
use crate::hash::{sha256, HashDigest};
use crate::node::VotingNode;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SyncError {
    #[error("a sync round is already open for this cluster")]
    RoundAlreadyOpen,
    #[error("round numbers must increase (last was {last})")]
    NonMonotoneRound { last: u64 },
    #[error("only the round's proposer may build the block")]
    NotProposer,
    #[error("ack round {got} does not match the open round {expected:?}")]
    StaleAck { expected: Option<u64>, got: u64 },
    #[error("retry cap of {cap} consecutive declines exceeded")]
    RetryCapExceeded { cap: u32 },
    #[error("failed to persist node state: {0}")]
    Persist(String),
    #[error(transparent)]
    Chain(#[from] ChainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AckFlag {
    Accept,
    Decline,
}

impl AckFlag {
    pub fn as_str(&self) -> &'static str {
        match self {
            AckFlag::Accept => "accept",
            AckFlag::Decline => "decline",
        }
    }
}

/// The upper level's answer to one round: accept (with the committed batch
/// size) or decline (resend the same data).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncAck {
    pub round: u64,
    pub flag: AckFlag,
    pub accepted_size: u64,
}

/// One lower chain's pending blocks for a round, fingerprinted by a hash over
/// the comma-joined hex hashes of the blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSubmission {
    pub source_chain_id: String,
    pub round: u64,
    pub blocks: Vec<Arc<Block>>,
    pub batch_hash: HashDigest,
}

impl BatchSubmission {
    pub fn new(source_chain_id: impl Into<String>, round: u64, blocks: Vec<Arc<Block>>) -> Self {
        let batch_hash = Self::compute_hash(&blocks);
        BatchSubmission {
            source_chain_id: source_chain_id.into(),
            round,
            blocks,
            batch_hash,
        }
    }

    pub fn compute_hash(blocks: &[Arc<Block>]) -> HashDigest {
        let joined = blocks
            .iter()
            .map(|b| b.hash().to_hex())
            .collect::<Vec<_>>()
            .join(",");
        sha256(joined.as_bytes())
    }
}

/// Round-robin proposer set with a strict >2/3 approval quorum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DelegateSet {
    members: Vec<String>,
    quorum_num: u64,
    quorum_den: u64,
}

impl DelegateSet {
    pub fn new(members: Vec<String>) -> Self {
        assert!(!members.is_empty(), "a delegate set cannot be empty");
        DelegateSet {
            members,
            quorum_num: 2,
            quorum_den: 3,
        }
    }

    pub fn members(&self) -> &[String] {
        &self.members
    }

    pub fn proposer(&self, round: u64) -> &str {
        &self.members[(round % self.members.len() as u64) as usize]
    }

    /// Strict quorum: approvals must exceed threshold * |delegates|.
    pub fn reaches_quorum(&self, approvals: usize) -> bool {
        (approvals as u64) * self.quorum_den > (self.members.len() as u64) * self.quorum_num
    }
}

/// How a delegate votes during finalization. Honest delegates verify the
/// proposal; the other behaviors model corrupted machines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DelegateBehavior {
    #[default]
    Honest,
    ApproveAll,
    RejectAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundPhase {
    Open,
    Collecting,
    Deciding,
    Acked,
}

/// One pause/collect/decide/ack cycle between adjacent levels.
#[derive(Debug, Clone)]
pub struct SyncRound {
    pub round: u64,
    pub level_pair: (u32, u32),
    pub phase: RoundPhase,
    pub submissions: BTreeMap<String, Vec<BatchSubmission>>,
}

impl SyncRound {
    pub fn submit(&mut self, submission: BatchSubmission) {
        self.phase = RoundPhase::Collecting;
        self.submissions
            .entry(submission.source_chain_id.clone())
            .or_default()
            .push(submission);
    }

    pub fn close_collection(&mut self) {
        self.phase = RoundPhase::Deciding;
    }
}

/// Consistency verdict over the submissions of one round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Consistency {
    Consistent(BTreeMap<String, BatchSubmission>),
    Inconsistent { reason: String },
}

/// Unanimity rule: every expected source reported, every submission for the
/// same lower chain carries an identical batch hash, and each hash matches
/// its blocks. Any divergence or absence declines the round.
pub fn check_consistency(
    submissions: &BTreeMap<String, Vec<BatchSubmission>>,
    expected_sources: &[String],
) -> Consistency {
    for source in expected_sources {
        let Some(subs) = submissions.get(source) else {
            return Consistency::Inconsistent {
                reason: format!("source {source} did not report"),
            };
        };
        if subs.is_empty() {
            return Consistency::Inconsistent {
                reason: format!("source {source} did not report"),
            };
        }
        let first_hash = subs[0].batch_hash;
        if subs.iter().any(|s| s.batch_hash != first_hash) {
            return Consistency::Inconsistent {
                reason: format!("divergent batch hashes for source {source}"),
            };
        }
        for sub in subs {
            if BatchSubmission::compute_hash(&sub.blocks) != sub.batch_hash {
                return Consistency::Inconsistent {
                    reason: format!("batch hash does not match blocks for source {source}"),
                };
            }
        }
    }
    for source in submissions.keys() {
        if !expected_sources.iter().any(|s| s == source) {
            return Consistency::Inconsistent {
                reason: format!("unexpected source {source}"),
            };
        }
    }
    let agreed = expected_sources
        .iter()
        .map(|s| (s.clone(), submissions[s][0].clone()))
        .collect();
    Consistency::Consistent(agreed)
}

/// Builds the round's batch block from the agreed batches, concatenated in
/// lexicographic source order. Only the round's proposer may do this.
pub fn propose_block(
    proposer: &str,
    delegates: &DelegateSet,
    round: u64,
    agreed: &BTreeMap<String, BatchSubmission>,
    upper: &Chain,
    patterns: &LevelPatterns,
    mining_budget: u64,
) -> Result<BatchBlock, SyncError> {
    if delegates.proposer(round) != proposer {
        return Err(SyncError::NotProposer);
    }
    let mut lotb = Vec::new();
    for submission in agreed.values() {
        lotb.extend(submission.blocks.iter().cloned());
    }
    Ok(upper.build_batch(round, lotb, patterns.level(upper.level()), mining_budget)?)
}

/// What an honest delegate knows when verifying a proposal: where each source
/// chain stood after the last accepted round.
pub type SourceHeads = BTreeMap<String, HashDigest>;

/// Full independent verification an honest delegate runs before approving.
pub fn verify_proposal(
    proposal: &BatchBlock,
    upper: &Chain,
    round: u64,
    agreed: &BTreeMap<String, BatchSubmission>,
    source_heads: &SourceHeads,
    patterns: &LevelPatterns,
) -> Result<(), String> {
    if proposal.election_id() != upper.election_id() {
        return Err("proposal belongs to a different election".into());
    }
    if proposal.level() != upper.level() {
        return Err(format!(
            "proposal level {} does not match chain level {}",
            proposal.level(),
            upper.level()
        ));
    }
    if proposal.round() != round {
        return Err(format!(
            "proposal round {} does not match open round {round}",
            proposal.round()
        ));
    }
    if proposal.prev_hash() != &upper.tip_hash() {
        return Err("proposal prev_hash does not extend the chain tip".into());
    }
    if !patterns
        .level(proposal.level())
        .matches(&Block::Batch(proposal.clone()).hash())
    {
        return Err("proposal hash violates the level pattern".into());
    }
    // The lotb must be exactly the agreed batches in lexicographic source
    // order; delegates reject injected, dropped, or reordered children.
    let expected: Vec<HashDigest> = agreed
        .values()
        .flat_map(|s| s.blocks.iter().map(|b| b.hash()))
        .collect();
    let actual: Vec<HashDigest> = proposal.lotb().iter().map(|b| b.hash()).collect();
    if expected != actual {
        return Err("proposal lotb differs from the agreed batches".into());
    }
    for (source, submission) in agreed {
        let mut head = *source_heads
            .get(source)
            .ok_or_else(|| format!("unknown source {source}"))?;
        for block in &submission.blocks {
            match block.as_ref() {
                Block::Genesis(_) => return Err(format!("genesis block inside batch of {source}")),
                Block::Vote(v) => {
                    if proposal.level() != 1 {
                        return Err(format!("vote block at level {}", proposal.level()));
                    }
                    if v.prev_hash() != &head {
                        return Err(format!("batch of {source} does not link to its chain head"));
                    }
                    if !patterns.level(0).matches(&block.hash()) {
                        return Err(format!("vote in batch of {source} violates the pattern"));
                    }
                }
                Block::Batch(b) => {
                    if b.level() + 1 != proposal.level() {
                        return Err(format!(
                            "child level {} under a level-{} block",
                            b.level(),
                            proposal.level()
                        ));
                    }
                    if b.prev_hash() != &head {
                        return Err(format!("batch of {source} does not link to its chain head"));
                    }
                    if let Err(e) = crate::chain::validate_child(block, patterns) {
                        return Err(format!("invalid child in batch of {source}: {e}"));
                    }
                }
            }
            head = block.hash();
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FinalizeOutcome {
    Finalized { approvals: usize },
    Rejected { approvals: usize, reason: String },
}

/// Every delegate independently verifies the proposal (or follows its
/// scripted behavior), then the strict quorum rule decides.
#[allow(clippy::too_many_arguments)]
pub fn dpos_finalize(
    delegates: &DelegateSet,
    behaviors: &BTreeMap<String, DelegateBehavior>,
    proposal: &BatchBlock,
    upper: &Chain,
    round: u64,
    agreed: &BTreeMap<String, BatchSubmission>,
    source_heads: &SourceHeads,
    patterns: &LevelPatterns,
) -> FinalizeOutcome {
    let honest_verdict = verify_proposal(proposal, upper, round, agreed, source_heads, patterns);
    let mut approvals = 0;
    for member in delegates.members() {
        let behavior = behaviors.get(member).copied().unwrap_or_default();
        let approves = match behavior {
            DelegateBehavior::Honest => honest_verdict.is_ok(),
            DelegateBehavior::ApproveAll => true,
            DelegateBehavior::RejectAll => false,
        };
        if approves {
            approvals += 1;
        }
    }
    if delegates.reaches_quorum(approvals) {
        FinalizeOutcome::Finalized { approvals }
    } else {
        FinalizeOutcome::Rejected {
            approvals,
            reason: match honest_verdict {
                Ok(()) => "insufficient approvals".to_string(),
                Err(e) => e,
            },
        }
    }
}

/// A lower participant in a sync round: a voting node (level 0) or an
/// aggregator acting as a source for the level above it.
pub trait SourcePort {
    fn source_id(&self) -> &str;
    fn source_level(&self) -> u32;
    fn pending_batch(&self) -> Vec<Arc<Block>>;
    fn begin_round(&mut self, round: u64);
    fn apply_ack(&mut self, ack: &SyncAck) -> Result<(), SyncError>;
    fn set_paused(&mut self, flag: bool);
}

impl SourcePort for VotingNode {
    fn source_id(&self) -> &str {
        self.node_id()
    }

    fn source_level(&self) -> u32 {
        0
    }

    fn pending_batch(&self) -> Vec<Arc<Block>> {
        VotingNode::pending_batch(self)
    }

    fn begin_round(&mut self, round: u64) {
        VotingNode::begin_round(self, round);
    }

    fn apply_ack(&mut self, ack: &SyncAck) -> Result<(), SyncError> {
        VotingNode::apply_ack(self, ack)
    }

    fn set_paused(&mut self, flag: bool) {
        VotingNode::set_paused(self, flag);
    }
}

/// A level >= 1 chain holder: the cluster chain (level 1) or a higher chain.
/// Its delegates are the member nodes of the cluster chain below it.
pub struct Aggregator {
    id: String,
    chain: Chain,
    delegates: DelegateSet,
    source_heads: SourceHeads,
    next_round: u64,
    open_round: Option<u64>,
    accepted_count: u64,
    in_round: Option<u64>,
    paused: bool,
}

impl Aggregator {
    /// `sources` are the lower chain ids feeding this aggregator; they double
    /// as the delegate set. Each source chain starts at its level's genesis.
    pub fn new(
        id: impl Into<String>,
        election_id: &str,
        level: u32,
        sources: Vec<String>,
    ) -> Result<Self, ChainError> {
        assert!(level >= 1, "aggregators live at level 1 and above");
        let lower_genesis = Chain::new(election_id, level - 1)?.tip_hash();
        let mut source_heads = BTreeMap::new();
        for source in &sources {
            source_heads.insert(source.clone(), lower_genesis);
        }
        Ok(Aggregator {
            id: id.into(),
            chain: Chain::new(election_id, level)?,
            delegates: DelegateSet::new(sources),
            source_heads,
            next_round: 0,
            open_round: None,
            accepted_count: 0,
            in_round: None,
            paused: false,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn level(&self) -> u32 {
        self.chain.level()
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn delegates(&self) -> &DelegateSet {
        &self.delegates
    }

    pub fn source_heads(&self) -> &SourceHeads {
        &self.source_heads
    }

    pub fn next_round(&self) -> u64 {
        self.next_round
    }

    pub fn accepted_count(&self) -> u64 {
        self.accepted_count
    }

    /// Opens a round toward this aggregator. At most one round may be open,
    /// and round numbers strictly increase.
    pub fn open_round(&mut self, round: u64) -> Result<SyncRound, SyncError> {
        if self.open_round.is_some() {
            return Err(SyncError::RoundAlreadyOpen);
        }
        if round < self.next_round {
            return Err(SyncError::NonMonotoneRound {
                last: self.next_round.saturating_sub(1),
            });
        }
        self.open_round = Some(round);
        self.next_round = round + 1;
        Ok(SyncRound {
            round,
            level_pair: (self.level() - 1, self.level()),
            phase: RoundPhase::Open,
            submissions: BTreeMap::new(),
        })
    }

    pub fn close_round(&mut self) {
        self.open_round = None;
    }
}

impl SourcePort for Aggregator {
    fn source_id(&self) -> &str {
        &self.id
    }

    fn source_level(&self) -> u32 {
        self.level()
    }

    fn pending_batch(&self) -> Vec<Arc<Block>> {
        self.chain.entries()[self.accepted_count as usize..].to_vec()
    }

    fn begin_round(&mut self, round: u64) {
        self.in_round = Some(round);
    }

    fn apply_ack(&mut self, ack: &SyncAck) -> Result<(), SyncError> {
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
            self.accepted_count += ack.accepted_size;
        }
        self.in_round = None;
        Ok(())
    }

    fn set_paused(&mut self, flag: bool) {
        self.paused = flag;
    }
}

/// Scripted interference with one source's submission in one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SubmissionFault {
    #[default]
    None,
    /// The submission never arrives; the round times out and declines.
    Drop,
    /// A corrupted batch is substituted for the honest one.
    Byzantine,
}

/// Builds the corrupted batch a Byzantine source submits: the first block is
/// replaced by a forgery that no longer links to the source's chain head (an
/// empty batch gains one forged block). The batch hash is recomputed, so the
/// corruption is self-consistent and only delegate verification catches it.
pub fn corrupt_submission(submission: &BatchSubmission) -> BatchSubmission {
    let zero = HashDigest::from_bytes([0u8; 32]);
    let mut blocks = submission.blocks.clone();
    let forged: Block = match blocks.first().map(|b| b.as_ref().clone()) {
        Some(Block::Vote(v)) => Block::Vote(
            VoteBlock::new(
                v.election_id(),
                v.ballot_box_id(),
                format!("{}X", v.candidate_id()),
                zero,
                v.nonce(),
            )
            .expect("forged vote fields stay legal"),
        ),
        Some(Block::Batch(b)) => Block::Batch(
            BatchBlock::new(
                b.election_id(),
                b.level(),
                b.round(),
                zero,
                b.lotb().to_vec(),
                b.nonce().map(|n| n.to_string()),
            )
            .expect("forged batch fields stay legal"),
        ),
        _ => Block::Vote(
            VoteBlock::new("E0", &submission.source_chain_id, "FORGED", zero, "0").unwrap_or_else(
                |_| VoteBlock::new("E0", "forged", "FORGED", zero, "0").expect("static fields"),
            ),
        ),
    };
    if blocks.is_empty() {
        blocks.push(Arc::new(forged));
    } else {
        blocks[0] = Arc::new(forged);
    }
    BatchSubmission::new(submission.source_chain_id.clone(), submission.round, blocks)
}

/// Everything a cycle needs beyond the participants themselves.
pub struct CycleContext<'a> {
    pub patterns: &'a LevelPatterns,
    pub retry_cap: u32,
    pub mining_budget: u64,
    pub latency_ms: u64,
    pub pause_ms: u64,
}

/// One line of the round log.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RoundLogEntry {
    pub round: u64,
    pub cluster: String,
    pub flag: &'static str,
    pub batch_sizes: BTreeMap<String, u64>,
    pub retries: u32,
}

#[derive(Debug)]
pub struct CycleReport {
    pub accepted: bool,
    pub attempts: u32,
    pub declines: u32,
    pub committed_blocks: u64,
    pub duration_ms: u64,
    pub log: Vec<RoundLogEntry>,
    pub failure: Option<SyncError>,
}

/// Runs one full synchronization cycle: pause, collect, check, propose,
/// finalize, ack, resume — retrying with fresh round numbers on decline until
/// accept or the retry cap.
pub fn run_sync_cycle(
    upper: &mut Aggregator,
    lowers: &mut [&mut dyn SourcePort],
    ctx: &CycleContext,
    behaviors: &BTreeMap<String, DelegateBehavior>,
    faults: &mut dyn FnMut(&str, u64) -> SubmissionFault,
) -> Result<CycleReport, SyncError> {
    let mut order: Vec<usize> = (0..lowers.len()).collect();
    order.sort_by(|&a, &b| lowers[a].source_id().cmp(lowers[b].source_id()));
    let expected: Vec<String> = order
        .iter()
        .map(|&i| lowers[i].source_id().to_string())
        .collect();

    for lower in lowers.iter_mut() {
        lower.set_paused(true);
    }

    let mut log = Vec::new();
    let mut declines = 0u32;
    let mut attempts = 0u32;
    let mut elapsed_ms = 0u64;
    let outcome = loop {
        attempts += 1;
        let round = upper.next_round();
        let mut sync_round = upper.open_round(round)?;

        let mut timeout = false;
        let mut batch_sizes = BTreeMap::new();
        for &i in &order {
            let lower = &mut lowers[i];
            lower.begin_round(round);
            let blocks = lower.pending_batch();
            let submission = BatchSubmission::new(lower.source_id(), round, blocks);
            let submission = match faults(lower.source_id(), round) {
                SubmissionFault::None => submission,
                SubmissionFault::Byzantine => corrupt_submission(&submission),
                SubmissionFault::Drop => {
                    timeout = true;
                    continue;
                }
            };
            batch_sizes.insert(
                submission.source_chain_id.clone(),
                submission.blocks.len() as u64,
            );
            sync_round.submit(submission);
        }
        sync_round.close_collection();
        // Submissions travel one latency up and acks one down; a silent
        // source is only declared missing after a three-latency timeout.
        elapsed_ms += if timeout {
            4 * ctx.latency_ms
        } else {
            2 * ctx.latency_ms
        };

        let flag = match check_consistency(&sync_round.submissions, &expected) {
            Consistency::Consistent(agreed) => {
                let proposer = upper.delegates().proposer(round).to_string();
                let proposal = propose_block(
                    &proposer,
                    upper.delegates(),
                    round,
                    &agreed,
                    upper.chain(),
                    ctx.patterns,
                    ctx.mining_budget,
                )?;
                let outcome = dpos_finalize(
                    upper.delegates(),
                    behaviors,
                    &proposal,
                    upper.chain(),
                    round,
                    &agreed,
                    upper.source_heads(),
                    ctx.patterns,
                );
                match outcome {
                    FinalizeOutcome::Finalized { .. } => {
                        let committed = proposal.lotb().len() as u64;
                        let pattern = ctx.patterns.level(upper.level());
                        upper
                            .chain
                            .append_in_place(Block::Batch(proposal), pattern)?;
                        for (source, submission) in &agreed {
                            if let Some(last) = submission.blocks.last() {
                                upper.source_heads.insert(source.clone(), last.hash());
                            }
                        }
                        sync_round.phase = RoundPhase::Acked;
                        for &i in &order {
                            let size = agreed[lowers[i].source_id()].blocks.len() as u64;
                            lowers[i].apply_ack(&SyncAck {
                                round,
                                flag: AckFlag::Accept,
                                accepted_size: size,
                            })?;
                        }
                        log.push(RoundLogEntry {
                            round,
                            cluster: upper.id().to_string(),
                            flag: AckFlag::Accept.as_str(),
                            batch_sizes,
                            retries: declines,
                        });
                        upper.close_round();
                        break Some(committed);
                    }
                    FinalizeOutcome::Rejected { .. } => AckFlag::Decline,
                }
            }
            Consistency::Inconsistent { .. } => AckFlag::Decline,
        };

        // Declined: tell everyone to keep their batches and retry with a
        // fresh round number.
        sync_round.phase = RoundPhase::Acked;
        for &i in &order {
            lowers[i].apply_ack(&SyncAck {
                round,
                flag,
                accepted_size: 0,
            })?;
        }
        log.push(RoundLogEntry {
            round,
            cluster: upper.id().to_string(),
            flag: flag.as_str(),
            batch_sizes,
            retries: declines,
        });
        upper.close_round();
        declines += 1;
        if declines > ctx.retry_cap {
            break None;
        }
    };

    for lower in lowers.iter_mut() {
        lower.set_paused(false);
    }
    let duration_ms = elapsed_ms.max(ctx.pause_ms);
    match outcome {
        Some(committed) => Ok(CycleReport {
            accepted: true,
            attempts,
            declines,
            committed_blocks: committed,
            duration_ms,
            log,
            failure: None,
        }),
        None => Ok(CycleReport {
            accepted: false,
            attempts,
            declines,
            committed_blocks: 0,
            duration_ms,
            log,
            failure: Some(SyncError::RetryCapExceeded { cap: ctx.retry_cap }),
        }),
    }
}
