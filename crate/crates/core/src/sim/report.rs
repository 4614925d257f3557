//! The run report: ground-truth oracle tally, recomputed tally, metrics, and
//! flagged incidents. Serialized with a fixed key order.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::tally::{Counts, Winner};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Incident {
    RetryCapExceeded { cluster: String, last_round: u64 },
    ExportValidationFailure { chain: String, detail: String },
    CastAnomaly { voter: String, detail: String },
    FaultSkipped { detail: String },
    UnservedVoters { count: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Metrics {
    /// Interval-scheduled sync cycles per aggregator.
    pub scheduled_rounds: BTreeMap<String, u64>,
    /// Final drain cycles per aggregator (one each on a clean run).
    pub drain_rounds: BTreeMap<String, u64>,
    /// Every round attempt across all aggregators, including retries.
    pub rounds_total: u64,
    pub declines_total: u64,
    pub retries_total: u64,
    /// Casts rejected because the center was paused for synchronization.
    pub paused_rejections: u64,
    /// Voters that never managed to cast; must be zero on fault-free runs.
    pub unserved_voters: u64,
    /// Vote blocks reachable per level after the final drain.
    pub votes_per_level: BTreeMap<String, u64>,
    /// Simulated duration of every sync cycle in order of execution.
    pub round_durations_ms: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SimulationReport {
    pub election_id: String,
    pub total_votes: u64,
    /// Ground truth from the workload generator: region -> candidate -> count.
    pub oracle_tally: Counts,
    /// Counted from the top-level chains.
    pub reported_tally: Counts,
    pub winners: BTreeMap<String, Winner>,
    pub metrics: Metrics,
    pub incidents: Vec<Incident>,
}

impl SimulationReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialization");
        s.push('\n');
        s
    }

    pub fn tallies_match(&self) -> bool {
        self.oracle_tally == self.reported_tally
    }
}
