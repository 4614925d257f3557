//! Counting: flatten the highest-level chain down to individual votes, count
//! per region and candidate, and name winners (ties are reported, never
//! broken).

use std::collections::BTreeMap;
use std::io::Read;
use std::sync::Arc;

use serde::Serialize;

use crate::block::Block;
use crate::chain::{Chain, LevelPatterns, ValidationFailure};
use crate::registry::CandidateRegistry;

#[derive(Debug, thiserror::Error)]
pub enum TallyError {
    #[error("chain is invalid: {0}")]
    InvalidChain(#[from] ValidationFailure),
    #[error("ballot box {0} is not in the region map")]
    UnknownBallotBox(String),
    #[error("vote for {candidate:?} which is not registered for box {ballot_box}")]
    UnknownCandidate {
        ballot_box: String,
        candidate: String,
    },
}

/// Total map from ballot box to region. Regions default to clusters; a
/// region map file can override.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RegionMap {
    map: BTreeMap<String, String>,
}

impl RegionMap {
    pub fn new(map: BTreeMap<String, String>) -> Self {
        RegionMap { map }
    }

    /// Loads a single JSON object `{ "<ballot_box_id>": "<region_id>", ... }`.
    pub fn from_reader<R: Read>(mut r: R) -> anyhow::Result<Self> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let map: BTreeMap<String, String> = serde_json::from_str(&text)?;
        Ok(RegionMap { map })
    }

    pub fn region_of(&self, ballot_box_id: &str) -> Option<&str> {
        self.map.get(ballot_box_id).map(|s| s.as_str())
    }

    pub fn regions(&self) -> impl Iterator<Item = &str> {
        let mut seen: Vec<&str> = self.map.values().map(|s| s.as_str()).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.into_iter()
    }

    pub fn boxes(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(b, r)| (b.as_str(), r.as_str()))
    }
}

/// Region outcome: a strict argmax winner or an explicit tie.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Winner {
    Winner(String),
    Tie(Vec<String>),
}

pub type Counts = BTreeMap<String, BTreeMap<String, u64>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TallyResult {
    pub per_region: Counts,
    pub total_votes: u64,
    pub winners: BTreeMap<String, Winner>,
}

/// Depth-first unwrap of every `lotb` down to vote blocks, in chain-then-lotb
/// order. The chain must validate first.
pub fn flatten(chain: &Chain, patterns: &LevelPatterns) -> Result<Vec<Arc<Block>>, TallyError> {
    chain.validate(patterns)?;
    let mut votes = Vec::new();
    for block in chain.entries() {
        collect_votes(block, &mut votes);
    }
    Ok(votes)
}

fn collect_votes(block: &Arc<Block>, out: &mut Vec<Arc<Block>>) {
    match block.as_ref() {
        Block::Vote(_) => out.push(Arc::clone(block)),
        Block::Batch(b) => {
            for child in b.lotb() {
                collect_votes(child, out);
            }
        }
        Block::Genesis(_) => {}
    }
}

/// Flattens several chains (e.g. all top-level chains) in the given order.
pub fn flatten_many(
    chains: &[&Chain],
    patterns: &LevelPatterns,
) -> Result<Vec<Arc<Block>>, TallyError> {
    let mut votes = Vec::new();
    for chain in chains {
        votes.extend(flatten(chain, patterns)?);
    }
    Ok(votes)
}

/// Exact counts per region per candidate, including blanks and zero rows for
/// every registered candidate. A vote for an unregistered candidate is a
/// hard error: it signals corruption, and skipping it silently would hide
/// that.
pub fn tally(
    votes: &[Arc<Block>],
    region_map: &RegionMap,
    candidates: &CandidateRegistry,
) -> Result<TallyResult, TallyError> {
    let mut per_region: Counts = BTreeMap::new();
    for (ballot_box, region) in region_map.boxes() {
        let row = per_region.entry(region.to_string()).or_default();
        if let Ok(list) = candidates.candidates_for(ballot_box) {
            for candidate in list {
                row.entry(candidate.id).or_insert(0);
            }
        }
    }
    let mut total = 0u64;
    for block in votes {
        let vote = match block.as_ref() {
            Block::Vote(v) => v,
            _ => continue,
        };
        let region = region_map
            .region_of(vote.ballot_box_id())
            .ok_or_else(|| TallyError::UnknownBallotBox(vote.ballot_box_id().to_string()))?;
        let valid = candidates
            .is_valid_choice(vote.ballot_box_id(), vote.candidate_id())
            .map_err(|_| TallyError::UnknownBallotBox(vote.ballot_box_id().to_string()))?;
        if !valid {
            return Err(TallyError::UnknownCandidate {
                ballot_box: vote.ballot_box_id().to_string(),
                candidate: vote.candidate_id().to_string(),
            });
        }
        *per_region
            .entry(region.to_string())
            .or_default()
            .entry(vote.candidate_id().to_string())
            .or_insert(0) += 1;
        total += 1;
    }
    let winners = per_region
        .iter()
        .map(|(region, counts)| (region.clone(), decide_winner(counts)))
        .collect();
    Ok(TallyResult {
        per_region,
        total_votes: total,
        winners,
    })
}

fn decide_winner(counts: &BTreeMap<String, u64>) -> Winner {
    let max = counts.values().copied().max().unwrap_or(0);
    let leaders: Vec<String> = counts
        .iter()
        .filter(|(_, &c)| c == max)
        .map(|(id, _)| id.clone())
        .collect();
    if leaders.len() == 1 {
        Winner::Winner(leaders.into_iter().next().expect("one leader"))
    } else {
        Winner::Tie(leaders)
    }
}

/// Counts vote blocks reachable from a chain without validating it; used for
/// conservation checks and metrics.
pub fn reachable_votes(chain: &Chain) -> u64 {
    let mut votes = Vec::new();
    for block in chain.entries() {
        collect_votes(block, &mut votes);
    }
    votes.len() as u64
}
