//! Election configuration: plain-text `key = value` files, validation, and
//! the canonical snapshot written into every run directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::chain::LevelPatterns;
use crate::mining::DEFAULT_MINING_BUDGET;

/// Hard ceiling for voters unless the scale override is set: the national
/// defaults exist as configuration, not as something a desk run executes.
pub const DESK_SCALE_VOTER_LIMIT: u64 = 1_000_000;

/// Highest difficulty allowed per level; mining must terminate fast at desk
/// scale.
pub const MAX_ZERO_BITS: u32 = 32;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(String),
    #[error("line {line}: expected `key = value`")]
    Malformed { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for {key}: {detail}")]
    BadValue {
        line: usize,
        key: &'static str,
        detail: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElectionConfig {
    pub election_id: String,
    /// Number of chain levels; level 0 holds voting centers, level 1 the
    /// cluster chains, higher levels a single chain each.
    pub levels: u32,
    pub clusters: u32,
    pub centers_per_cluster: u32,
    pub voters: u64,
    pub sync_interval_s: u64,
    pub pause_s: u64,
    pub latency_ms: u64,
    /// Difficulty per level, level 0 first; missing levels default to 0
    /// (only level 0 is mined unless configured otherwise).
    pub zero_bits: Vec<u32>,
    pub election_duration_s: u64,
    pub seed: u64,
    pub retry_cap: u32,
    pub mining_budget: u64,
    /// Candidate ids used for every ballot box when no candidates file is
    /// given.
    pub candidates: Vec<String>,
    pub password_salt: String,
    pub voters_file: Option<PathBuf>,
    pub candidates_file: Option<PathBuf>,
    pub region_map_file: Option<PathBuf>,
    /// Set only by the command line; required to run above the desk-scale
    /// voter limit.
    pub override_scale: bool,
}

impl Default for ElectionConfig {
    /// National-scale defaults. They parse and validate, but `run` refuses
    /// them without the scale override.
    fn default() -> Self {
        ElectionConfig {
            election_id: "E1".to_string(),
            levels: 2,
            clusters: 700,
            centers_per_cluster: 10,
            voters: 56_000_000,
            sync_interval_s: 300,
            pause_s: 60,
            latency_ms: 100,
            zero_bits: vec![8],
            election_duration_s: 28_800,
            seed: 42,
            retry_cap: 10,
            mining_budget: DEFAULT_MINING_BUDGET,
            candidates: vec![
                "CAND-A".to_string(),
                "CAND-B".to_string(),
                "CAND-C".to_string(),
            ],
            password_salt: "evote-mock-salt".to_string(),
            voters_file: None,
            candidates_file: None,
            region_map_file: None,
            override_scale: false,
        }
    }
}

impl ElectionConfig {
    /// Parses `key = value` lines. Blank lines and `#` comments are allowed;
    /// unknown keys are errors so typos fail fast. Relative file paths are
    /// resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self, ConfigError> {
        let mut config = ElectionConfig::default();
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::Malformed { line: line_no })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |key: &'static str, detail: String| ConfigError::BadValue {
                line: line_no,
                key,
                detail,
            };
            match key {
                "election_id" => config.election_id = value.to_string(),
                "levels" => config.levels = parse_num(value).map_err(|e| bad("levels", e))?,
                "clusters" => config.clusters = parse_num(value).map_err(|e| bad("clusters", e))?,
                "centers_per_cluster" => {
                    config.centers_per_cluster =
                        parse_num(value).map_err(|e| bad("centers_per_cluster", e))?
                }
                "voters" => config.voters = parse_num(value).map_err(|e| bad("voters", e))?,
                "sync_interval_s" => {
                    config.sync_interval_s =
                        parse_num(value).map_err(|e| bad("sync_interval_s", e))?
                }
                "pause_s" => config.pause_s = parse_num(value).map_err(|e| bad("pause_s", e))?,
                "latency_ms" => {
                    config.latency_ms = parse_num(value).map_err(|e| bad("latency_ms", e))?
                }
                "zero_bits" => {
                    config.zero_bits = value
                        .split(',')
                        .map(|p| parse_num(p.trim()))
                        .collect::<Result<_, _>>()
                        .map_err(|e| bad("zero_bits", e))?
                }
                "election_duration_s" => {
                    config.election_duration_s =
                        parse_num(value).map_err(|e| bad("election_duration_s", e))?
                }
                "seed" => config.seed = parse_num(value).map_err(|e| bad("seed", e))?,
                "retry_cap" => {
                    config.retry_cap = parse_num(value).map_err(|e| bad("retry_cap", e))?
                }
                "mining_budget" => {
                    config.mining_budget = parse_num(value).map_err(|e| bad("mining_budget", e))?
                }
                "candidates" => {
                    config.candidates = value
                        .split(',')
                        .map(|c| c.trim().to_string())
                        .filter(|c| !c.is_empty())
                        .collect()
                }
                "password_salt" => config.password_salt = value.to_string(),
                "voters_file" => config.voters_file = Some(resolve(base_dir, value)),
                "candidates_file" => config.candidates_file = Some(resolve(base_dir, value)),
                "region_map_file" => config.region_map_file = Some(resolve(base_dir, value)),
                "override_scale" => {
                    config.override_scale = value
                        .parse()
                        .map_err(|_| bad("override_scale", "expected true or false".into()))?
                }
                other => {
                    return Err(ConfigError::UnknownKey {
                        line: line_no,
                        key: other.to_string(),
                    })
                }
            }
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive: [(&str, u64); 8] = [
            ("levels", self.levels as u64),
            ("clusters", self.clusters as u64),
            ("centers_per_cluster", self.centers_per_cluster as u64),
            ("voters", self.voters),
            ("sync_interval_s", self.sync_interval_s),
            ("pause_s", self.pause_s),
            ("election_duration_s", self.election_duration_s),
            ("mining_budget", self.mining_budget),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        if self.election_id.is_empty() {
            return Err(ConfigError::Invalid("election_id must not be empty".into()));
        }
        if self.election_id.contains('|') || self.election_id.contains(',') {
            return Err(ConfigError::Invalid(
                "election_id may not contain '|' or ','".into(),
            ));
        }
        if self.candidates.is_empty() && self.candidates_file.is_none() {
            return Err(ConfigError::Invalid("no candidates configured".into()));
        }
        for c in &self.candidates {
            if c.contains('|') || c.contains(',') {
                return Err(ConfigError::Invalid(
                    "candidate ids may not contain '|' or ','".into(),
                ));
            }
            if c == crate::block::BLANK_CANDIDATE {
                return Err(ConfigError::Invalid(
                    "the blank vote is implicit and cannot be listed".into(),
                ));
            }
        }
        for &bits in &self.zero_bits {
            if bits > MAX_ZERO_BITS {
                return Err(ConfigError::Invalid(format!(
                    "zero_bits {bits} exceeds the desk-scale maximum of {MAX_ZERO_BITS}"
                )));
            }
        }
        if self.voters > DESK_SCALE_VOTER_LIMIT && !self.override_scale {
            return Err(ConfigError::Invalid(format!(
                "{} voters exceeds the desk-scale guardrail of {DESK_SCALE_VOTER_LIMIT}; \
                 pass --override-scale to run anyway",
                self.voters
            )));
        }
        Ok(())
    }

    pub fn level_patterns(&self) -> LevelPatterns {
        LevelPatterns::new(self.zero_bits.clone())
    }

    /// Canonical snapshot: every effective value, fixed order, reparseable.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "election_id = {}", self.election_id);
        let _ = writeln!(s, "levels = {}", self.levels);
        let _ = writeln!(s, "clusters = {}", self.clusters);
        let _ = writeln!(s, "centers_per_cluster = {}", self.centers_per_cluster);
        let _ = writeln!(s, "voters = {}", self.voters);
        let _ = writeln!(s, "sync_interval_s = {}", self.sync_interval_s);
        let _ = writeln!(s, "pause_s = {}", self.pause_s);
        let _ = writeln!(s, "latency_ms = {}", self.latency_ms);
        let zero_bits: Vec<String> = self.zero_bits.iter().map(|b| b.to_string()).collect();
        let _ = writeln!(s, "zero_bits = {}", zero_bits.join(","));
        let _ = writeln!(s, "election_duration_s = {}", self.election_duration_s);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "retry_cap = {}", self.retry_cap);
        let _ = writeln!(s, "mining_budget = {}", self.mining_budget);
        let _ = writeln!(s, "candidates = {}", self.candidates.join(","));
        let _ = writeln!(s, "password_salt = {}", self.password_salt);
        if let Some(p) = &self.voters_file {
            let _ = writeln!(s, "voters_file = {}", p.display());
        }
        if let Some(p) = &self.candidates_file {
            let _ = writeln!(s, "candidates_file = {}", p.display());
        }
        if let Some(p) = &self.region_map_file {
            let _ = writeln!(s, "region_map_file = {}", p.display());
        }
        let _ = writeln!(s, "override_scale = {}", self.override_scale);
        s
    }
}

fn parse_num<T: std::str::FromStr>(value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| format!("{e}"))
}

fn resolve(base_dir: Option<&Path>, value: &str) -> PathBuf {
    let path = PathBuf::from(value);
    if path.is_absolute() {
        path
    } else {
        match base_dir {
            Some(dir) => dir.join(path),
            None => path,
        }
    }
}
