//! Deterministic discrete-event simulation: topology construction, seeded
//! workload, fault injection, and the run loop.

pub mod clock;
pub mod faults;
pub mod report;
mod runner;

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use faults::{Fault, FaultScript};
pub use report::{Incident, Metrics, SimulationReport};
pub use runner::{run, RunOutput};

use crate::block::{Block, VoteBlock};
use crate::chain::{Chain, ChainError};
use crate::config::{ConfigError, ElectionConfig};
use crate::hash::sha256;
use crate::node::VotingNode;
use crate::registry::{
    load_candidates_jsonl, load_voters_jsonl, Candidate, CandidateRegistry, Registry,
};
use crate::sync::{Aggregator, SubmissionFault, SyncError};
use crate::tally::RegionMap;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("unknown entity: {0}")]
    UnknownEntity(String),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("io error: {0}")]
    Io(String),
}

/// A derived RNG stream that stays stable even when other streams change how
/// much randomness they consume.
pub(crate) fn derived_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let digest = sha256(format!("votechain.rng.{label}.{seed}").as_bytes());
    let mut sub = [0u8; 8];
    sub.copy_from_slice(&digest.as_bytes()[..8]);
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(sub))
}

fn id_width(count: u64) -> usize {
    std::cmp::max(2, count.saturating_sub(1).to_string().len())
}

pub fn cluster_ids(config: &ElectionConfig) -> Vec<String> {
    let w = id_width(config.clusters as u64);
    (0..config.clusters).map(|i| format!("C{i:0w$}")).collect()
}

pub fn box_ids_of_cluster(config: &ElectionConfig, cluster_id: &str) -> Vec<String> {
    let w = id_width(config.centers_per_cluster as u64);
    (0..config.centers_per_cluster)
        .map(|j| format!("{cluster_id}-B{j:0w$}"))
        .collect()
}

pub fn all_box_ids(config: &ElectionConfig) -> Vec<String> {
    cluster_ids(config)
        .iter()
        .flat_map(|c| box_ids_of_cluster(config, c))
        .collect()
}

/// Chains above the cluster level are single per level: L2, L3, ...
pub fn upper_chain_id(level: u32) -> String {
    format!("L{level}")
}

fn voter_id_for(index: u64, total: u64) -> String {
    let w = std::cmp::max(7, total.saturating_sub(1).to_string().len());
    format!("VOTER-{index:0w$}")
}

/// The ballot-box/candidate relation is a pure function of the public
/// configuration (or of the referenced candidates file), so auditors can
/// rebuild it without any simulator state.
pub fn derive_candidates(config: &ElectionConfig) -> Result<CandidateRegistry, SimError> {
    if let Some(path) = &config.candidates_file {
        let file = std::fs::File::open(path)
            .map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        return load_candidates_jsonl(std::io::BufReader::new(file))
            .map_err(|e| SimError::Setup(e.to_string()));
    }
    let mut registry = CandidateRegistry::new();
    let candidates: Vec<Candidate> = config
        .candidates
        .iter()
        .map(|id| Candidate {
            id: id.clone(),
            display_name: id.clone(),
        })
        .collect();
    for box_id in all_box_ids(config) {
        registry
            .register_box(box_id, candidates.clone())
            .map_err(|e| SimError::Setup(e.to_string()))?;
    }
    Ok(registry)
}

/// Region map: explicit file wins, otherwise region = cluster.
pub fn derive_region_map(config: &ElectionConfig) -> Result<RegionMap, SimError> {
    if let Some(path) = &config.region_map_file {
        let file = std::fs::File::open(path)
            .map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        return RegionMap::from_reader(std::io::BufReader::new(file))
            .map_err(|e| SimError::Setup(e.to_string()));
    }
    let mut map = BTreeMap::new();
    for cluster in cluster_ids(config) {
        for box_id in box_ids_of_cluster(config, &cluster) {
            map.insert(box_id, cluster.clone());
        }
    }
    Ok(RegionMap::new(map))
}

#[derive(Debug, Clone)]
pub struct RosterEntry {
    pub voter_id: String,
    pub password: String,
    pub assigned_box: String,
}

pub struct ClusterInfo {
    pub id: String,
    pub members: Vec<usize>,
}

/// The whole simulated election: registry, centers, aggregator levels, and
/// the workload roster.
pub struct System {
    pub config: ElectionConfig,
    pub registry: Registry,
    pub nodes: Vec<VotingNode>,
    node_index: BTreeMap<String, usize>,
    pub clusters: Vec<ClusterInfo>,
    /// `aggregators[k]` holds the level `k+1` aggregators.
    pub aggregators: Vec<Vec<Aggregator>>,
    pub region_map: RegionMap,
    pub roster: Vec<RosterEntry>,
    /// Intended candidate per roster index, drawn once at build time.
    pub choices: Vec<String>,
    submission_faults: BTreeMap<(String, u64), SubmissionFault>,
}

/// Builds centers under clusters under optional higher levels, populates the
/// registry with voters assigned round-robin to ballot boxes, and loads the
/// candidate relation.
pub fn build_topology(config: &ElectionConfig) -> Result<System, SimError> {
    config.validate()?;
    let candidates = derive_candidates(config)?;
    let registry = Registry::new(candidates, config.password_salt.clone());
    let patterns = config.level_patterns();

    let cluster_names = cluster_ids(config);
    let mut nodes = Vec::new();
    let mut node_index = BTreeMap::new();
    let mut clusters = Vec::new();
    for cluster in &cluster_names {
        let mut members = Vec::new();
        for box_id in box_ids_of_cluster(config, cluster) {
            if !registry.candidates().contains_box(&box_id) {
                return Err(SimError::Setup(format!(
                    "candidates file does not cover ballot box {box_id}"
                )));
            }
            let node = VotingNode::new(
                box_id.clone(),
                &config.election_id,
                patterns.level(0),
                config.mining_budget,
            )?;
            node_index.insert(box_id, nodes.len());
            members.push(nodes.len());
            nodes.push(node);
        }
        clusters.push(ClusterInfo {
            id: cluster.clone(),
            members,
        });
    }

    let mut aggregators: Vec<Vec<Aggregator>> = Vec::new();
    if config.levels >= 2 {
        let level1 = clusters
            .iter()
            .map(|c| {
                Aggregator::new(
                    c.id.clone(),
                    &config.election_id,
                    1,
                    c.members
                        .iter()
                        .map(|&i| nodes[i].node_id().to_string())
                        .collect(),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        aggregators.push(level1);
        for level in 2..config.levels {
            let sources: Vec<String> = aggregators[(level - 2) as usize]
                .iter()
                .map(|a| a.id().to_string())
                .collect();
            let upper =
                Aggregator::new(upper_chain_id(level), &config.election_id, level, sources)?;
            aggregators.push(vec![upper]);
        }
    }

    let mut roster = Vec::with_capacity(config.voters as usize);
    if let Some(path) = &config.voters_file {
        let file = std::fs::File::open(path)
            .map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        let text = std::io::read_to_string(file)
            .map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        load_voters_jsonl(text.as_bytes(), &registry)
            .map_err(|e| SimError::Setup(e.to_string()))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let value: serde_json::Value =
                serde_json::from_str(line).map_err(|e| SimError::Setup(e.to_string()))?;
            roster.push(RosterEntry {
                voter_id: value["voter_id"].as_str().unwrap_or_default().to_string(),
                password: value["password"].as_str().unwrap_or_default().to_string(),
                assigned_box: value["ballot_box_id"]
                    .as_str()
                    .unwrap_or_default()
                    .to_string(),
            });
        }
    } else {
        let mut password_rng = derived_rng(config.seed, "passwords");
        let box_ids = all_box_ids(config);
        for i in 0..config.voters {
            let voter_id = voter_id_for(i, config.voters);
            let password = format!("pw-{:012x}", password_rng.gen::<u64>() & 0xffff_ffff_ffff);
            let assigned_box = box_ids[(i % box_ids.len() as u64) as usize].clone();
            registry
                .enroll(&voter_id, &password, &assigned_box)
                .map_err(|e| SimError::Setup(e.to_string()))?;
            roster.push(RosterEntry {
                voter_id,
                password,
                assigned_box,
            });
        }
    }

    // Each voter's intended choice, drawn from their box's ballot (blank
    // included) with a stream independent of everything else.
    let mut choice_rng = derived_rng(config.seed, "choices");
    let mut choices = Vec::with_capacity(roster.len());
    for entry in &roster {
        let ballot = registry
            .candidates()
            .candidates_for(&entry.assigned_box)
            .map_err(|e| SimError::Setup(e.to_string()))?;
        let pick = choice_rng.gen_range(0..ballot.len());
        choices.push(ballot[pick].id.clone());
    }

    let region_map = derive_region_map(config)?;
    for box_id in node_index.keys() {
        if region_map.region_of(box_id).is_none() {
            return Err(SimError::Setup(format!(
                "region map does not cover ballot box {box_id}"
            )));
        }
    }

    Ok(System {
        config: config.clone(),
        registry,
        nodes,
        node_index,
        clusters,
        aggregators,
        region_map,
        roster,
        choices,
        submission_faults: BTreeMap::new(),
    })
}

impl System {
    pub fn node_by_id(&self, id: &str) -> Option<usize> {
        self.node_index.get(id).copied()
    }

    pub fn cluster_of_node(&self, node_idx: usize) -> usize {
        self.clusters
            .iter()
            .position(|c| c.members.contains(&node_idx))
            .expect("every node belongs to a cluster")
    }

    /// All chains in the system, keyed by chain id (which doubles as the
    /// export file stem).
    pub fn chains(&self) -> BTreeMap<String, &Chain> {
        let mut map = BTreeMap::new();
        for node in &self.nodes {
            map.insert(node.node_id().to_string(), node.chain());
        }
        for level in &self.aggregators {
            for agg in level {
                map.insert(agg.id().to_string(), agg.chain());
            }
        }
        map
    }

    pub fn top_level(&self) -> u32 {
        self.config.levels - 1
    }

    /// The highest-level chains, in id order. With a single level these are
    /// the center chains themselves.
    pub fn top_chains(&self) -> Vec<&Chain> {
        match self.aggregators.last() {
            Some(level) => level.iter().map(|a| a.chain()).collect(),
            None => self.nodes.iter().map(|n| n.chain()).collect(),
        }
    }

    /// Nearest available center for voters of `from_box`: smallest index
    /// distance within the cluster, then across clusters.
    pub fn nearest_available_center(&self, from_box: &str) -> Option<usize> {
        let from_idx = self.node_by_id(from_box)?;
        let cluster_idx = self.cluster_of_node(from_idx);
        let in_cluster = self.clusters[cluster_idx]
            .members
            .iter()
            .copied()
            .filter(|&i| i != from_idx && self.nodes[i].is_available())
            .min_by_key(|&i| ((i as i64 - from_idx as i64).unsigned_abs(), i));
        in_cluster.or_else(|| {
            (0..self.nodes.len())
                .filter(|&i| i != from_idx && self.nodes[i].is_available())
                .min_by_key(|&i| ((i as i64 - from_idx as i64).unsigned_abs(), i))
        })
    }

    /// Applies a fault. Time-scheduled faults are applied the moment the run
    /// loop reaches them; round faults register for the sync layer.
    pub fn inject(&mut self, fault: &Fault) -> Result<(), SimError> {
        match fault {
            Fault::Tamper {
                node, block_index, ..
            } => {
                let idx = self
                    .node_by_id(node)
                    .ok_or_else(|| SimError::UnknownEntity(node.clone()))?;
                let chain = self.nodes[idx].chain();
                let entry = chain
                    .entries()
                    .get(*block_index)
                    .ok_or_else(|| SimError::UnknownEntity(format!("{node} block {block_index}")))?
                    .clone();
                let vote = entry.as_vote().ok_or_else(|| {
                    SimError::UnknownEntity(format!("{node} block {block_index} is not a vote"))
                })?;
                // One flipped bit in the stored prev_hash: the block no
                // longer hashes to what its successor (or the upper level's
                // chain head) expects.
                let mut bytes = *vote.prev_hash().as_bytes();
                bytes[0] ^= 0x01;
                let forged = Block::Vote(
                    VoteBlock::new(
                        vote.election_id(),
                        vote.ballot_box_id(),
                        vote.candidate_id(),
                        crate::hash::HashDigest::from_bytes(bytes),
                        vote.nonce(),
                    )
                    .expect("tampered fields stay legal"),
                );
                self.nodes[idx]
                    .chain_mut()
                    .replace_block_unchecked(block_index + 1, forged);
                Ok(())
            }
            Fault::CenterDown { center, .. } => {
                let idx = self
                    .node_by_id(center)
                    .ok_or_else(|| SimError::UnknownEntity(center.clone()))?;
                self.nodes[idx].set_available(false);
                self.reassign_unvoted_from(center);
                Ok(())
            }
            Fault::ByzantineSubmission { node, round } => {
                self.check_source_exists(node)?;
                self.submission_faults
                    .insert((node.clone(), *round), SubmissionFault::Byzantine);
                Ok(())
            }
            Fault::DropSubmission { node, round } => {
                self.check_source_exists(node)?;
                self.submission_faults
                    .insert((node.clone(), *round), SubmissionFault::Drop);
                Ok(())
            }
        }
    }

    fn check_source_exists(&self, id: &str) -> Result<(), SimError> {
        let is_agg = self.aggregators.iter().flatten().any(|a| a.id() == id);
        if self.node_index.contains_key(id) || is_agg {
            Ok(())
        } else {
            Err(SimError::UnknownEntity(id.to_string()))
        }
    }

    /// Sends every unvoted voter of a box to the nearest available center.
    pub fn reassign_unvoted_from(&mut self, box_id: &str) {
        let Some(target) = self.nearest_available_center(box_id) else {
            return;
        };
        let target_box = self.nodes[target].ballot_box_id().to_string();
        for voter in self.registry.unvoted_voters_of_box(box_id) {
            // Voters racing the reassignment keep their vote; errors here
            // can only be AlreadyVoted, which is exactly the guarantee.
            let _ = self.registry.reassign(&voter, &target_box);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_config(voters: u64, clusters: u32, centers: u32, levels: u32) -> ElectionConfig {
        ElectionConfig {
            voters,
            clusters,
            centers_per_cluster: centers,
            levels,
            zero_bits: vec![4],
            ..ElectionConfig::default()
        }
    }

    #[test]
    fn topology_counts_follow_the_config() {
        let system = build_topology(&desk_config(60, 2, 3, 2)).unwrap();
        assert_eq!(system.nodes.len(), 6);
        assert_eq!(system.aggregators.len(), 1);
        assert_eq!(system.aggregators[0].len(), 2);
        assert_eq!(system.registry.voter_count(), 60);
        assert_eq!(system.chains().len(), 8);
        // Round-robin assignment puts 10 voters on each box.
        for node in &system.nodes {
            let unvoted = system.registry.unvoted_voters_of_box(node.ballot_box_id());
            assert_eq!(unvoted.len(), 10);
        }
    }

    #[test]
    fn three_levels_add_a_single_top_chain() {
        let system = build_topology(&desk_config(10, 2, 2, 3)).unwrap();
        assert_eq!(system.aggregators.len(), 2);
        assert_eq!(system.aggregators[1].len(), 1);
        assert_eq!(system.aggregators[1][0].id(), "L2");
        assert_eq!(system.top_chains().len(), 1);
    }

    #[test]
    fn zero_voters_is_config_invalid() {
        match build_topology(&desk_config(0, 1, 1, 2)) {
            Err(SimError::Config(_)) => {}
            Err(other) => panic!("expected a config error, got {other}"),
            Ok(_) => panic!("zero voters must not build"),
        }
    }

    #[test]
    fn region_defaults_to_cluster() {
        let system = build_topology(&desk_config(10, 2, 2, 2)).unwrap();
        assert_eq!(system.region_map.region_of("C00-B01"), Some("C00"));
        assert_eq!(system.region_map.region_of("C01-B00"), Some("C01"));
    }

    #[test]
    fn tamper_injection_breaks_validation() {
        let mut system = build_topology(&desk_config(10, 1, 1, 2)).unwrap();
        let creds = crate::registry::Credentials::new(
            system.roster[0].voter_id.clone(),
            system.roster[0].password.clone(),
        );
        system.nodes[0]
            .cast_vote(&system.registry, &creds, "CAND-A")
            .unwrap();
        let patterns = system.config.level_patterns();
        assert!(system.nodes[0].chain().validate(&patterns).is_ok());
        system
            .inject(&Fault::Tamper {
                node: "C00-B00".into(),
                block_index: 0,
                at_time_s: 0,
            })
            .unwrap();
        assert!(system.nodes[0].chain().validate(&patterns).is_err());
    }

    #[test]
    fn unknown_entities_are_rejected() {
        let mut system = build_topology(&desk_config(10, 1, 1, 2)).unwrap();
        assert!(matches!(
            system.inject(&Fault::CenterDown {
                center: "C09-B99".into(),
                at_time_s: 0
            }),
            Err(SimError::UnknownEntity(_))
        ));
        assert!(matches!(
            system.inject(&Fault::Tamper {
                node: "C00-B00".into(),
                block_index: 5,
                at_time_s: 0
            }),
            Err(SimError::UnknownEntity(_))
        ));
    }

    #[test]
    fn center_down_reassigns_unvoted_voters_to_the_nearest_center() {
        let mut system = build_topology(&desk_config(30, 2, 3, 2)).unwrap();
        system
            .inject(&Fault::CenterDown {
                center: "C00-B01".into(),
                at_time_s: 0,
            })
            .unwrap();
        assert!(!system.nodes[1].is_available());
        assert!(system.registry.unvoted_voters_of_box("C00-B01").is_empty());
        // Nearest by index distance inside the cluster is B00.
        assert_eq!(system.registry.unvoted_voters_of_box("C00-B00").len(), 10);
    }

    #[test]
    fn nearest_center_falls_back_across_clusters() {
        let mut system = build_topology(&desk_config(20, 2, 2, 2)).unwrap();
        system.nodes[0].set_available(false);
        // With the whole first cluster down, C01-B00 (index 2) is nearest to
        // C00-B01 (index 1).
        system.nodes[1].set_available(false);
        assert_eq!(system.nearest_available_center("C00-B01"), Some(2));
    }

    #[test]
    fn rosters_and_choices_are_seed_deterministic() {
        let a = build_topology(&desk_config(25, 1, 2, 2)).unwrap();
        let b = build_topology(&desk_config(25, 1, 2, 2)).unwrap();
        assert_eq!(
            a.roster.iter().map(|r| &r.password).collect::<Vec<_>>(),
            b.roster.iter().map(|r| &r.password).collect::<Vec<_>>()
        );
        assert_eq!(a.choices, b.choices);
    }
}
