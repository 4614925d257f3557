//! Third-party audit of exported chain files.
//!
//! The auditor holds nothing but the files and the public election
//! parameters (difficulty pattern, candidate relation, region map, published
//! tip hashes). It re-verifies every hash link, every mined pattern, the
//! per-source linkage of batch children, canonical encoding of every line,
//! and recomputes the tally from scratch.
//!
//! The canonical-encoding rule is what makes single-byte tampering fully
//! detectable: a line must be byte-identical to the encoding of the block it
//! parses to, so any surviving mutation must change a field value, which
//! changes the block's hash, which breaks a link or the published tip.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::Serialize;

use crate::block::{Block, GenesisBlock};
use crate::chain::{Chain, LevelPatterns};
use crate::codec::{encode_block, parse_block};
use crate::config::ElectionConfig;
use crate::hash::HashDigest;
use crate::registry::CandidateRegistry;
use crate::sim::{derive_candidates, derive_region_map, derived_rng, SimError};
use crate::tally::{tally, RegionMap, TallyResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FindingCode {
    ParseError,
    Format,
    NonCanonical,
    BrokenLink,
    PatternViolation,
    LevelMismatch,
    ElectionMismatch,
    RoundOrder,
    ChildLink,
    TipMismatch,
    TallyFailure,
    CrossLevelMismatch,
    CountMismatch,
}

/// One audit failure, pinned to a file and line (line 0 = whole file).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub file: String,
    pub line: usize,
    pub code: FindingCode,
    pub detail: String,
}

#[derive(Debug, Default, Serialize)]
pub struct AuditReport {
    pub findings: Vec<Finding>,
    pub tally: Option<TallyResult>,
}

impl AuditReport {
    pub fn is_ok(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn has_parse_errors(&self) -> bool {
        self.findings
            .iter()
            .any(|f| f.code == FindingCode::ParseError)
    }

    /// Exit-code contract: 0 clean, 2 findings, 3 parse failures.
    pub fn exit_code(&self) -> i32 {
        if self.has_parse_errors() {
            3
        } else if self.findings.is_empty() {
            0
        } else {
            2
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialization");
        s.push('\n');
        s
    }
}

/// Everything public that an audit needs.
pub struct AuditConfig {
    pub election_id: String,
    pub patterns: LevelPatterns,
    pub candidates: CandidateRegistry,
    pub region_map: RegionMap,
}

impl AuditConfig {
    pub fn from_election(config: &ElectionConfig) -> Result<Self, SimError> {
        Ok(AuditConfig {
            election_id: config.election_id.clone(),
            patterns: config.level_patterns(),
            candidates: derive_candidates(config)?,
            region_map: derive_region_map(config)?,
        })
    }
}

/// Audits one chain file. Returns the parsed chain when the file was at
/// least structurally readable, plus every finding.
pub fn audit_chain_bytes(
    file_name: &str,
    bytes: &[u8],
    cfg: &AuditConfig,
    expected_tip: Option<&HashDigest>,
) -> (Option<Chain>, Vec<Finding>) {
    let mut findings = Vec::new();
    let fail = |line: usize, code: FindingCode, detail: String| Finding {
        file: file_name.to_string(),
        line,
        code,
        detail,
    };

    let Ok(text) = std::str::from_utf8(bytes) else {
        return (
            None,
            vec![fail(
                0,
                FindingCode::ParseError,
                "file is not valid UTF-8".into(),
            )],
        );
    };
    if text.is_empty() {
        return (
            None,
            vec![fail(1, FindingCode::ParseError, "empty file".into())],
        );
    }
    if !text.ends_with('\n') {
        findings.push(fail(
            0,
            FindingCode::Format,
            "file does not end with a newline".into(),
        ));
    }

    let mut blocks = Vec::new();
    for (i, line) in text.split_terminator('\n').enumerate() {
        let line_no = i + 1;
        if line.is_empty() {
            findings.push(fail(line_no, FindingCode::Format, "empty line".into()));
            continue;
        }
        let block = match parse_block(line) {
            Ok(block) => block,
            Err(e) => {
                findings.push(fail(line_no, FindingCode::ParseError, e.to_string()));
                return (None, findings);
            }
        };
        if encode_block(&block) != line {
            findings.push(fail(
                line_no,
                FindingCode::NonCanonical,
                "line is not the canonical encoding of its block".into(),
            ));
        }
        blocks.push(std::sync::Arc::new(block));
    }

    let genesis = match blocks.first().map(|b| b.as_ref()) {
        Some(Block::Genesis(g)) => g.clone(),
        _ => {
            findings.push(fail(
                1,
                FindingCode::Format,
                "first line is not a genesis block".into(),
            ));
            return (None, findings);
        }
    };
    if genesis.election_id() != cfg.election_id {
        findings.push(fail(
            1,
            FindingCode::ElectionMismatch,
            format!(
                "genesis election {:?} is not the audited election {:?}",
                genesis.election_id(),
                cfg.election_id
            ),
        ));
    }

    let level = genesis.level();
    let own_pattern = cfg.patterns.level(level);
    let mut head = blocks[0].hash();
    let mut last_round: Option<u64> = None;
    // Open sub-chain heads per child level: every batch child must link to
    // either the shared lower-level genesis or a child already seen, which is
    // exactly the per-source chain discipline.
    let mut open_heads: BTreeMap<u32, BTreeMap<String, u32>> = BTreeMap::new();

    for (index, block) in blocks.iter().enumerate().skip(1) {
        let line_no = index + 1;
        if block.election_id() != cfg.election_id {
            findings.push(fail(
                line_no,
                FindingCode::ElectionMismatch,
                "block belongs to a different election".into(),
            ));
        }
        match block.as_ref() {
            Block::Genesis(_) => {
                findings.push(fail(
                    line_no,
                    FindingCode::Format,
                    "genesis block after line 1".into(),
                ));
            }
            Block::Vote(v) => {
                if level != 0 {
                    findings.push(fail(
                        line_no,
                        FindingCode::LevelMismatch,
                        format!("vote block in a level-{level} chain"),
                    ));
                }
                if v.prev_hash() != &head {
                    findings.push(fail(
                        line_no,
                        FindingCode::BrokenLink,
                        "prev_hash does not match the previous block".into(),
                    ));
                }
            }
            Block::Batch(b) => {
                if b.level() != level {
                    findings.push(fail(
                        line_no,
                        FindingCode::LevelMismatch,
                        format!("level-{} block in a level-{level} chain", b.level()),
                    ));
                }
                if b.prev_hash() != &head {
                    findings.push(fail(
                        line_no,
                        FindingCode::BrokenLink,
                        "prev_hash does not match the previous block".into(),
                    ));
                }
                if let Some(last) = last_round {
                    if b.round() <= last {
                        findings.push(fail(
                            line_no,
                            FindingCode::RoundOrder,
                            format!("round {} after round {last}", b.round()),
                        ));
                    }
                }
                last_round = Some(b.round());
                audit_children(
                    file_name,
                    line_no,
                    &cfg.election_id,
                    b.level(),
                    b.lotb(),
                    &cfg.patterns,
                    &mut open_heads,
                    &mut findings,
                );
            }
        }
        let hash = block.hash();
        if !own_pattern.matches(&hash) {
            findings.push(fail(
                line_no,
                FindingCode::PatternViolation,
                format!("block hash violates the level-{level} pattern"),
            ));
        }
        head = hash;
    }

    if let Some(expected) = expected_tip {
        if &head != expected {
            findings.push(fail(
                blocks.len(),
                FindingCode::TipMismatch,
                format!("chain tip {head} does not match the published tip {expected}"),
            ));
        }
    }

    let chain = Chain::from_parts(genesis.election_id().to_string(), level, blocks);
    (Some(chain), findings)
}

#[allow(clippy::too_many_arguments)]
fn audit_children(
    file_name: &str,
    line_no: usize,
    election_id: &str,
    parent_level: u32,
    children: &[std::sync::Arc<Block>],
    patterns: &LevelPatterns,
    open_heads: &mut BTreeMap<u32, BTreeMap<String, u32>>,
    findings: &mut Vec<Finding>,
) {
    let child_level = parent_level - 1;
    let lower_genesis = GenesisBlock::new(election_id, child_level)
        .map(|g| Block::Genesis(g).hash())
        .ok();
    for child in children {
        let fail = |code: FindingCode, detail: String| Finding {
            file: file_name.to_string(),
            line: line_no,
            code,
            detail,
        };
        let (prev, level_ok) = match child.as_ref() {
            Block::Vote(v) => (Some(*v.prev_hash()), child_level == 0),
            Block::Batch(b) => (Some(*b.prev_hash()), b.level() == child_level),
            Block::Genesis(_) => (None, false),
        };
        if !level_ok {
            findings.push(fail(
                FindingCode::LevelMismatch,
                format!("lotb child does not belong at level {child_level}"),
            ));
        }
        if !patterns.level(child_level).matches(&child.hash()) {
            findings.push(fail(
                FindingCode::PatternViolation,
                format!("lotb child violates the level-{child_level} pattern"),
            ));
        }
        if let Some(prev) = prev {
            let heads = open_heads.entry(child_level).or_default();
            let prev_hex = prev.to_hex();
            let linked = if lower_genesis.as_ref() == Some(&prev) {
                true
            } else if let Some(count) = heads.get_mut(&prev_hex) {
                *count -= 1;
                if *count == 0 {
                    heads.remove(&prev_hex);
                }
                true
            } else {
                false
            };
            if !linked {
                findings.push(fail(
                    FindingCode::ChildLink,
                    "lotb child does not continue any known source chain".into(),
                ));
            }
            *heads.entry(child.hash().to_hex()).or_insert(0) += 1;
        }
        if let Block::Batch(b) = child.as_ref() {
            audit_children(
                file_name,
                line_no,
                election_id,
                b.level(),
                b.lotb(),
                patterns,
                open_heads,
                findings,
            );
        }
    }
}

pub fn audit_chain_file(
    path: &Path,
    cfg: &AuditConfig,
    expected_tip: Option<&HashDigest>,
) -> (Option<Chain>, Vec<Finding>) {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    match std::fs::read(path) {
        Ok(bytes) => audit_chain_bytes(&name, &bytes, cfg, expected_tip),
        Err(e) => (
            None,
            vec![Finding {
                file: name,
                line: 0,
                code: FindingCode::ParseError,
                detail: format!("cannot read file: {e}"),
            }],
        ),
    }
}

fn load_tips(dir: &Path) -> Result<BTreeMap<String, HashDigest>, Finding> {
    let path = dir.join("tips.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Finding {
        file: "tips.json".into(),
        line: 0,
        code: FindingCode::ParseError,
        detail: format!("cannot read published tips: {e}"),
    })?;
    let raw: BTreeMap<String, String> = serde_json::from_str(&text).map_err(|e| Finding {
        file: "tips.json".into(),
        line: 0,
        code: FindingCode::ParseError,
        detail: e.to_string(),
    })?;
    let mut tips = BTreeMap::new();
    for (id, hex) in raw {
        let digest = HashDigest::from_hex(&hex).map_err(|e| Finding {
            file: "tips.json".into(),
            line: 0,
            code: FindingCode::ParseError,
            detail: format!("tip for {id}: {e}"),
        })?;
        tips.insert(id, digest);
    }
    Ok(tips)
}

/// Audits a whole run directory: every chain file against its published tip,
/// vote conservation across levels, the accepted-count files, and an
/// independent recount from the top-level chains.
pub fn audit_run_dir(dir: &Path) -> Result<AuditReport, SimError> {
    let config = ElectionConfig::load(&dir.join("config.txt"))
        .map_err(|e| SimError::Io(format!("run directory config: {e}")))?;
    let cfg = AuditConfig::from_election(&config)?;
    let mut report = AuditReport::default();

    let tips = match load_tips(dir) {
        Ok(tips) => tips,
        Err(finding) => {
            report.findings.push(finding);
            BTreeMap::new()
        }
    };

    let chains_dir = dir.join("chains");
    let mut names: Vec<String> = Vec::new();
    let entries = std::fs::read_dir(&chains_dir)
        .map_err(|e| SimError::Io(format!("{}: {e}", chains_dir.display())))?;
    for entry in entries {
        let entry = entry.map_err(|e| SimError::Io(e.to_string()))?;
        if entry.path().extension().and_then(|e| e.to_str()) == Some("jsonl") {
            names.push(
                entry
                    .path()
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            );
        }
    }
    names.sort();

    for id in &tips {
        if !names.contains(id.0) {
            report.findings.push(Finding {
                file: format!("{}.jsonl", id.0),
                line: 0,
                code: FindingCode::Format,
                detail: "published tip has no chain file".into(),
            });
        }
    }

    let mut chains_by_level: BTreeMap<u32, Vec<(String, Chain)>> = BTreeMap::new();
    for name in &names {
        let path = chains_dir.join(format!("{name}.jsonl"));
        let tip = tips.get(name);
        if tip.is_none() && !tips.is_empty() {
            report.findings.push(Finding {
                file: format!("{name}.jsonl"),
                line: 0,
                code: FindingCode::Format,
                detail: "chain file has no published tip".into(),
            });
        }
        let (chain, findings) = audit_chain_file(&path, &cfg, tip);
        report.findings.extend(findings);
        if let Some(chain) = chain {
            chains_by_level
                .entry(chain.level())
                .or_default()
                .push((name.clone(), chain));
        }
    }

    // Vote conservation: the multiset of vote hashes must be identical at
    // every level (exports happen after the final drain).
    let votes_at = |chains: &[(String, Chain)]| -> Vec<String> {
        let mut hashes: Vec<String> = chains
            .iter()
            .flat_map(|(_, c)| {
                let mut votes = Vec::new();
                for block in c.entries() {
                    collect_vote_hashes(block, &mut votes);
                }
                votes
            })
            .collect();
        hashes.sort();
        hashes
    };
    let levels: Vec<u32> = chains_by_level.keys().copied().collect();
    for pair in levels.windows(2) {
        let lower = votes_at(&chains_by_level[&pair[0]]);
        let upper = votes_at(&chains_by_level[&pair[1]]);
        if lower != upper {
            report.findings.push(Finding {
                file: String::new(),
                line: 0,
                code: FindingCode::CrossLevelMismatch,
                detail: format!(
                    "level {} holds {} votes but level {} holds {}",
                    pair[0],
                    lower.len(),
                    pair[1],
                    upper.len()
                ),
            });
        }
    }

    // Accepted-count files must add up to the votes committed at level 1.
    let counts_dir = dir.join("counts");
    if counts_dir.is_dir() && chains_by_level.contains_key(&1) {
        let mut total = 0u64;
        let mut entries: Vec<_> = std::fs::read_dir(&counts_dir)
            .map_err(|e| SimError::Io(e.to_string()))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("count"))
            .collect();
        entries.sort();
        for path in entries {
            match crate::node::read_count_file(&path) {
                Ok(n) => total += n,
                Err(e) => report.findings.push(Finding {
                    file: path
                        .file_name()
                        .unwrap_or_default()
                        .to_string_lossy()
                        .into_owned(),
                    line: 0,
                    code: FindingCode::ParseError,
                    detail: e.to_string(),
                }),
            }
        }
        let committed = votes_at(&chains_by_level[&1]).len() as u64;
        if total != committed {
            report.findings.push(Finding {
                file: String::new(),
                line: 0,
                code: FindingCode::CountMismatch,
                detail: format!(
                    "accepted-count files sum to {total} but level 1 committed {committed} votes"
                ),
            });
        }
    }

    // Independent recount from the top level.
    if report.findings.is_empty() {
        if let Some((_, top)) = chains_by_level.iter().next_back() {
            let mut votes = Vec::new();
            for (_, chain) in top {
                for block in chain.entries() {
                    collect_vote_blocks(block, &mut votes);
                }
            }
            match tally(&votes, &cfg.region_map, &cfg.candidates) {
                Ok(result) => report.tally = Some(result),
                Err(e) => report.findings.push(Finding {
                    file: String::new(),
                    line: 0,
                    code: FindingCode::TallyFailure,
                    detail: e.to_string(),
                }),
            }
        }
    }

    Ok(report)
}

fn collect_vote_hashes(block: &std::sync::Arc<Block>, out: &mut Vec<String>) {
    match block.as_ref() {
        Block::Vote(_) => out.push(block.hash().to_hex()),
        Block::Batch(b) => {
            for child in b.lotb() {
                collect_vote_hashes(child, out);
            }
        }
        Block::Genesis(_) => {}
    }
}

fn collect_vote_blocks(block: &std::sync::Arc<Block>, out: &mut Vec<std::sync::Arc<Block>>) {
    match block.as_ref() {
        Block::Vote(_) => out.push(std::sync::Arc::clone(block)),
        Block::Batch(b) => {
            for child in b.lotb() {
                collect_vote_blocks(child, out);
            }
        }
        Block::Genesis(_) => {}
    }
}

/// Byte-level scan for forbidden substrings (voter ids, passwords) across
/// export files. Patterns are grouped by their first two bytes so one pass
/// over the haystack suffices.
pub fn scan_for_substrings(haystack: &[u8], patterns: &[&[u8]]) -> Vec<usize> {
    let mut by_prefix: BTreeMap<[u8; 2], Vec<usize>> = BTreeMap::new();
    for (i, p) in patterns.iter().enumerate() {
        if p.len() >= 2 {
            by_prefix.entry([p[0], p[1]]).or_default().push(i);
        }
    }
    let mut hits = Vec::new();
    if by_prefix.is_empty() || haystack.len() < 2 {
        return hits;
    }
    for start in 0..haystack.len() - 1 {
        let key = [haystack[start], haystack[start + 1]];
        if let Some(candidates) = by_prefix.get(&key) {
            for &i in candidates {
                let p = patterns[i];
                if haystack.len() - start >= p.len() && &haystack[start..start + p.len()] == p {
                    hits.push(i);
                }
            }
        }
    }
    hits.sort_unstable();
    hits.dedup();
    hits
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TamperStats {
    pub trials: u64,
    pub detected: u64,
}

impl TamperStats {
    pub fn detection_rate(&self) -> f64 {
        if self.trials == 0 {
            1.0
        } else {
            self.detected as f64 / self.trials as f64
        }
    }
}

/// Seeded single-byte mutation trials over the exported chains of a run
/// directory. Each trial flips one byte in a copy of one file and audits
/// that file against its published tip.
pub fn tamper_trials(dir: &Path, n_mutations: u64, seed: u64) -> Result<TamperStats, SimError> {
    let config = ElectionConfig::load(&dir.join("config.txt"))
        .map_err(|e| SimError::Io(format!("run directory config: {e}")))?;
    let cfg = AuditConfig::from_election(&config)?;
    let tips = load_tips(dir).map_err(|f| SimError::Io(f.detail))?;

    let chains_dir = dir.join("chains");
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    let entries = std::fs::read_dir(&chains_dir)
        .map_err(|e| SimError::Io(format!("{}: {e}", chains_dir.display())))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("jsonl"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(SimError::Io("run directory has no chain exports".into()));
    }
    for path in paths {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let bytes = std::fs::read(&path).map_err(|e| SimError::Io(e.to_string()))?;
        files.push((stem, bytes));
    }
    let total_bytes: u64 = files.iter().map(|(_, b)| b.len() as u64).sum();
    if total_bytes == 0 {
        return Err(SimError::Io("chain exports are empty".into()));
    }

    let mut rng = derived_rng(seed, "tamper");
    let mut detected = 0;
    for _ in 0..n_mutations {
        let mut offset = rng.gen_range(0..total_bytes);
        let mut file_idx = 0;
        while offset >= files[file_idx].1.len() as u64 {
            offset -= files[file_idx].1.len() as u64;
            file_idx += 1;
        }
        let (name, original) = &files[file_idx];
        let mut mutated = original.clone();
        let position = offset as usize;
        let replacement = loop {
            let candidate: u8 = rng.gen();
            if candidate != mutated[position] {
                break candidate;
            }
        };
        mutated[position] = replacement;
        let (_, findings) = audit_chain_bytes(name, &mutated, &cfg, tips.get(name.as_str()));
        if !findings.is_empty() {
            detected += 1;
        }
    }
    Ok(TamperStats {
        trials: n_mutations,
        detected,
    })
}
