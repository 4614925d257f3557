//! The run loop: seeded voter arrivals, interval-scheduled synchronization,
//! the final drain, tallying, and run-directory exports.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::codec::chain_to_string;
use crate::config::ElectionConfig;
use crate::node::NodeError;
use crate::registry::{Credentials, RegistryError};
use crate::sim::clock::EventQueue;
use crate::sim::report::{Incident, Metrics, SimulationReport};
use crate::sim::{build_topology, derived_rng, Fault, FaultScript, SimError, System};
use crate::sync::{run_sync_cycle, CycleContext, RoundLogEntry, SourcePort};
use crate::tally::{flatten_many, reachable_votes, tally, Counts, TallyResult, Winner};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ev {
    SyncTick { index: u64 },
    Unpause { cluster: usize },
    Arrival { voter: usize, attempt: u32 },
    TimedFault { index: usize },
}

/// Everything a finished run yields. When an output directory was given the
/// same data is also on disk.
pub struct RunOutput {
    pub report: SimulationReport,
    pub tally: TallyResult,
    pub round_log: Vec<RoundLogEntry>,
    pub system: System,
    pub faults: FaultScript,
}

struct RunState {
    queue: EventQueue<Ev>,
    pause_until: Vec<u64>,
    round_log: Vec<RoundLogEntry>,
    metrics: Metrics,
    incidents: Vec<Incident>,
    oracle_by_box: BTreeMap<String, BTreeMap<String, u64>>,
    successes: u64,
    unserved: u64,
}

const MAX_CAST_ATTEMPTS: u32 = 200;

/// Runs a full election: voters arrive as a seeded uniform process, every
/// `sync_interval_s` each cluster (and each higher level) runs a sync cycle,
/// and after the last cast a final drain commits every pending batch at every
/// level. Fully deterministic given (config, fault script).
pub fn run(
    config: &ElectionConfig,
    faults: &FaultScript,
    out_dir: Option<&Path>,
) -> Result<RunOutput, SimError> {
    let mut system = build_topology(config)?;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir.join("chains")).map_err(io_err(dir))?;
        std::fs::create_dir_all(dir.join("counts")).map_err(io_err(dir))?;
        for node in &mut system.nodes {
            let path = dir.join("counts").join(format!("{}.count", node.node_id()));
            node.set_count_path(path)
                .map_err(|e| SimError::Io(e.to_string()))?;
        }
    }

    let mut state = RunState {
        queue: EventQueue::new(),
        pause_until: vec![0; system.clusters.len()],
        round_log: Vec::new(),
        metrics: Metrics::default(),
        incidents: Vec::new(),
        oracle_by_box: BTreeMap::new(),
        successes: 0,
        unserved: 0,
    };

    let duration_ms = config.election_duration_s * 1000;
    let interval_ms = config.sync_interval_s * 1000;
    let ticks = config.election_duration_s / config.sync_interval_s;
    for index in 1..=ticks {
        state
            .queue
            .schedule(index * interval_ms, Ev::SyncTick { index });
    }

    // Round-keyed faults register up front; timed faults become events. Both
    // must reference live entities.
    let mut timed_faults = Vec::new();
    for fault in &faults.faults {
        match fault {
            Fault::ByzantineSubmission { .. } | Fault::DropSubmission { .. } => {
                system.inject(fault)?;
            }
            Fault::Tamper {
                node, at_time_s, ..
            } => {
                system
                    .node_by_id(node)
                    .ok_or_else(|| SimError::UnknownEntity(node.clone()))?;
                state.queue.schedule(
                    at_time_s * 1000,
                    Ev::TimedFault {
                        index: timed_faults.len(),
                    },
                );
                timed_faults.push(fault.clone());
            }
            Fault::CenterDown { center, at_time_s } => {
                system
                    .node_by_id(center)
                    .ok_or_else(|| SimError::UnknownEntity(center.clone()))?;
                state.queue.schedule(
                    at_time_s * 1000,
                    Ev::TimedFault {
                        index: timed_faults.len(),
                    },
                );
                timed_faults.push(fault.clone());
            }
        }
    }

    let mut arrival_rng = derived_rng(config.seed, "arrivals");
    for voter in 0..system.roster.len() {
        let at = arrival_rng.gen_range(0..duration_ms);
        state.queue.schedule(at, Ev::Arrival { voter, attempt: 0 });
    }

    while let Some((now, event)) = state.queue.pop() {
        match event {
            Ev::SyncTick { index } => {
                system.registry.advance_round(index);
                run_all_levels(&mut system, &mut state, now, false)?;
            }
            Ev::Unpause { cluster } => {
                if now >= state.pause_until[cluster] {
                    for &i in &system.clusters[cluster].members {
                        system.nodes[i].set_paused(false);
                    }
                }
            }
            Ev::Arrival { voter, attempt } => {
                process_arrival(&mut system, &mut state, voter, attempt, now);
            }
            Ev::TimedFault { index } => {
                if let Err(e) = system.inject(&timed_faults[index]) {
                    state.incidents.push(Incident::FaultSkipped {
                        detail: e.to_string(),
                    });
                }
            }
        }
    }

    // Final drain: one cycle per aggregator, bottom level first, so the top
    // chains hold every vote before counting.
    run_all_levels(&mut system, &mut state, duration_ms, true)?;

    finish(system, state, faults.clone(), out_dir)
}

fn io_err(dir: &Path) -> impl Fn(std::io::Error) -> SimError + '_ {
    move |e| SimError::Io(format!("{}: {e}", dir.display()))
}

/// Runs one sync cycle for every aggregator, lowest level first, in id
/// order. During the election (`drain = false`) member centers stay paused
/// for the cycle's simulated duration.
fn run_all_levels(
    system: &mut System,
    state: &mut RunState,
    now: u64,
    drain: bool,
) -> Result<(), SimError> {
    let patterns = system.config.level_patterns();
    let retry_cap = system.config.retry_cap;
    let mining_budget = system.config.mining_budget;
    let latency_ms = system.config.latency_ms;
    let pause_ms = system.config.pause_s * 1000;
    let n_levels = system.aggregators.len();

    for level_idx in 0..n_levels {
        for agg_idx in 0..system.aggregators[level_idx].len() {
            let ctx = CycleContext {
                patterns: &patterns,
                retry_cap,
                mining_budget,
                latency_ms,
                pause_ms,
            };
            let report = {
                let System {
                    nodes,
                    aggregators,
                    submission_faults,
                    clusters,
                    ..
                } = system;
                let mut faults = |source: &str, round: u64| {
                    submission_faults
                        .remove(&(source.to_string(), round))
                        .unwrap_or_default()
                };
                let behaviors = BTreeMap::new();
                if level_idx == 0 {
                    let members = &clusters[agg_idx].members;
                    let mut lowers: Vec<&mut dyn SourcePort> = nodes
                        .iter_mut()
                        .enumerate()
                        .filter(|(i, _)| members.contains(i))
                        .map(|(_, n)| n as &mut dyn SourcePort)
                        .collect();
                    run_sync_cycle(
                        &mut aggregators[0][agg_idx],
                        &mut lowers,
                        &ctx,
                        &behaviors,
                        &mut faults,
                    )?
                } else {
                    let (below, here) = aggregators.split_at_mut(level_idx);
                    let mut lowers: Vec<&mut dyn SourcePort> = below[level_idx - 1]
                        .iter_mut()
                        .map(|a| a as &mut dyn SourcePort)
                        .collect();
                    run_sync_cycle(
                        &mut here[0][agg_idx],
                        &mut lowers,
                        &ctx,
                        &behaviors,
                        &mut faults,
                    )?
                }
            };

            let agg_id = system.aggregators[level_idx][agg_idx].id().to_string();
            let counter = if drain {
                &mut state.metrics.drain_rounds
            } else {
                &mut state.metrics.scheduled_rounds
            };
            *counter.entry(agg_id.clone()).or_insert(0) += 1;
            state.metrics.rounds_total += report.attempts as u64;
            state.metrics.declines_total += report.declines as u64;
            state.metrics.retries_total += (report.attempts - 1) as u64;
            state.metrics.round_durations_ms.push(report.duration_ms);
            state.round_log.extend(report.log);
            if !report.accepted {
                state.incidents.push(Incident::RetryCapExceeded {
                    cluster: agg_id,
                    last_round: system.aggregators[level_idx][agg_idx].next_round() - 1,
                });
            }

            // The pause covers the whole cycle; casts resume only when the
            // window closes.
            if !drain && level_idx == 0 {
                let until = now + report.duration_ms;
                state.pause_until[agg_idx] = until;
                for &i in &system.clusters[agg_idx].members.clone() {
                    system.nodes[i].set_paused(true);
                }
                state
                    .queue
                    .schedule(until, Ev::Unpause { cluster: agg_idx });
            }
        }
    }
    Ok(())
}

fn process_arrival(
    system: &mut System,
    state: &mut RunState,
    voter: usize,
    attempt: u32,
    now: u64,
) {
    if attempt >= MAX_CAST_ATTEMPTS {
        state.unserved += 1;
        state.incidents.push(Incident::CastAnomaly {
            voter: system.roster[voter].voter_id.clone(),
            detail: "gave up after too many attempts".to_string(),
        });
        return;
    }
    let entry = &system.roster[voter];
    let credentials = Credentials::new(entry.voter_id.clone(), entry.password.clone());
    let mut hops = 0;
    loop {
        hops += 1;
        if hops > 4 {
            state.unserved += 1;
            state.incidents.push(Incident::CastAnomaly {
                voter: credentials.voter_id,
                detail: "no reachable voting center".to_string(),
            });
            return;
        }
        let Ok(box_id) = system.registry.effective_ballot_box(&credentials.voter_id) else {
            state.unserved += 1;
            state.incidents.push(Incident::CastAnomaly {
                voter: credentials.voter_id,
                detail: "voter missing from registry".to_string(),
            });
            return;
        };
        let Some(node_idx) = system.node_by_id(&box_id) else {
            state.unserved += 1;
            state.incidents.push(Incident::CastAnomaly {
                voter: credentials.voter_id,
                detail: format!("no center serves box {box_id}"),
            });
            return;
        };
        if !system.nodes[node_idx].is_available() {
            // Disaster path: move this voter to the nearest live center and
            // try again right away.
            match system.nearest_available_center(&box_id) {
                Some(target) => {
                    let target_box = system.nodes[target].ballot_box_id().to_string();
                    let _ = system.registry.reassign(&credentials.voter_id, &target_box);
                    continue;
                }
                None => {
                    state.unserved += 1;
                    state.incidents.push(Incident::CastAnomaly {
                        voter: credentials.voter_id,
                        detail: "every voting center is down".to_string(),
                    });
                    return;
                }
            }
        }
        let choice = system.choices[voter].clone();
        match system.nodes[node_idx].cast_vote(&system.registry, &credentials, &choice) {
            Ok(_) => {
                state.successes += 1;
                *state
                    .oracle_by_box
                    .entry(box_id)
                    .or_default()
                    .entry(choice)
                    .or_insert(0) += 1;
                return;
            }
            Err(NodeError::VotingPaused) => {
                state.metrics.paused_rejections += 1;
                let cluster = system.cluster_of_node(node_idx);
                let retry_at = state.pause_until[cluster].max(now) + 1;
                state.queue.schedule(
                    retry_at,
                    Ev::Arrival {
                        voter,
                        attempt: attempt + 1,
                    },
                );
                return;
            }
            Err(NodeError::CenterUnavailable) => continue,
            Err(NodeError::InvalidCandidate) => {
                // Only possible with per-box candidate files after a
                // reassignment; fall back to a deterministic valid choice.
                let ballot = system
                    .registry
                    .candidates()
                    .candidates_for(&box_id)
                    .expect("box exists");
                system.choices[voter] = ballot[voter % ballot.len()].id.clone();
                continue;
            }
            Err(NodeError::Registry(RegistryError::AlreadyVoted)) => {
                state.incidents.push(Incident::CastAnomaly {
                    voter: credentials.voter_id,
                    detail: "double cast attempt reached a node".to_string(),
                });
                return;
            }
            Err(e) => {
                state.unserved += 1;
                state.incidents.push(Incident::CastAnomaly {
                    voter: credentials.voter_id,
                    detail: e.to_string(),
                });
                return;
            }
        }
    }
}

fn finish(
    system: System,
    mut state: RunState,
    faults: FaultScript,
    out_dir: Option<&Path>,
) -> Result<RunOutput, SimError> {
    let patterns = system.config.level_patterns();

    // Fold the by-box oracle into regions.
    let mut oracle: Counts = BTreeMap::new();
    for (box_id, counts) in &state.oracle_by_box {
        let region = system
            .region_map
            .region_of(box_id)
            .unwrap_or("UNMAPPED")
            .to_string();
        let row = oracle.entry(region).or_default();
        for (candidate, n) in counts {
            *row.entry(candidate.clone()).or_insert(0) += n;
        }
    }
    zero_fill(&system, &mut oracle);

    // Every chain must still validate; anything else is an incident the
    // report has to surface.
    for (id, chain) in system.chains() {
        if let Err(failure) = chain.validate(&patterns) {
            state.incidents.push(Incident::ExportValidationFailure {
                chain: id.clone(),
                detail: failure.to_string(),
            });
        }
    }

    let top_chains = system.top_chains();
    let (reported_tally, winners, total_votes, tally_result) =
        match flatten_many(&top_chains, &patterns)
            .and_then(|votes| tally(&votes, &system.region_map, system.registry.candidates()))
        {
            Ok(result) => (
                result.per_region.clone(),
                result.winners.clone(),
                result.total_votes,
                result,
            ),
            Err(e) => {
                state.incidents.push(Incident::ExportValidationFailure {
                    chain: "<top>".to_string(),
                    detail: e.to_string(),
                });
                let empty = TallyResult {
                    per_region: BTreeMap::new(),
                    total_votes: 0,
                    winners: BTreeMap::new(),
                };
                (BTreeMap::new(), BTreeMap::<String, Winner>::new(), 0, empty)
            }
        };

    let mut votes_per_level = BTreeMap::new();
    votes_per_level.insert(
        "0".to_string(),
        system
            .nodes
            .iter()
            .map(|n| n.chain().entries().len() as u64)
            .sum(),
    );
    for (level_idx, level) in system.aggregators.iter().enumerate() {
        votes_per_level.insert(
            (level_idx + 1).to_string(),
            level.iter().map(|a| reachable_votes(a.chain())).sum(),
        );
    }
    state.metrics.votes_per_level = votes_per_level;
    state.metrics.unserved_voters = system.roster.len() as u64 - state.successes;
    if state.metrics.unserved_voters > 0 {
        state.incidents.push(Incident::UnservedVoters {
            count: state.metrics.unserved_voters,
        });
    }

    let report = SimulationReport {
        election_id: system.config.election_id.clone(),
        total_votes,
        oracle_tally: oracle,
        reported_tally,
        winners,
        metrics: state.metrics,
        incidents: state.incidents,
    };

    let output = RunOutput {
        report,
        tally: tally_result,
        round_log: state.round_log,
        system,
        faults,
    };
    if let Some(dir) = out_dir {
        write_run_dir(dir, &output)?;
    }
    Ok(output)
}

/// The oracle lists every registered candidate of every region, zeroes
/// included, exactly like the recount does.
fn zero_fill(system: &System, counts: &mut Counts) {
    for (box_id, region) in system.region_map.boxes() {
        if let Ok(list) = system.registry.candidates().candidates_for(box_id) {
            let row = counts.entry(region.to_string()).or_default();
            for candidate in list {
                row.entry(candidate.id).or_insert(0);
            }
        }
    }
}

/// Lays the run directory out on disk:
///
/// ```text
/// config.txt        canonical config snapshot
/// faults.jsonl      fault script copy (when any)
/// chains/<id>.jsonl every chain, canonical format
/// tips.json         published tip hash per chain
/// counts/<id>.count per-center accepted counts (written live)
/// round_log.jsonl   one line per sync round
/// report.json       the simulation report
/// meta.json         timestamp only; excluded from determinism comparisons
/// ```
fn write_run_dir(dir: &Path, output: &RunOutput) -> Result<(), SimError> {
    let write = |path: &Path, text: &str| -> Result<(), SimError> {
        std::fs::write(path, text).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))
    };
    std::fs::create_dir_all(dir.join("chains")).map_err(io_err(dir))?;
    write(&dir.join("config.txt"), &output.system.config.snapshot())?;
    if !output.faults.faults.is_empty() {
        write(&dir.join("faults.jsonl"), &output.faults.to_jsonl())?;
    }
    let mut tips = BTreeMap::new();
    for (id, chain) in output.system.chains() {
        write(
            &dir.join("chains").join(format!("{id}.jsonl")),
            &chain_to_string(chain),
        )?;
        tips.insert(id, chain.tip_hash().to_hex());
    }
    let mut tips_json = serde_json::to_string_pretty(&tips).expect("tips serialization");
    tips_json.push('\n');
    write(&dir.join("tips.json"), &tips_json)?;
    let mut log = String::new();
    for entry in &output.round_log {
        log.push_str(&serde_json::to_string(entry).expect("log serialization"));
        log.push('\n');
    }
    write(&dir.join("round_log.jsonl"), &log)?;
    write(&dir.join("report.json"), &output.report.to_json())?;
    let meta = format!(
        "{{\"created_unix_ms\":{},\"tool\":\"votechain {}\"}}\n",
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0),
        env!("CARGO_PKG_VERSION"),
    );
    write(&dir.join("meta.json"), &meta)?;
    Ok(())
}
