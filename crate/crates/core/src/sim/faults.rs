//! Fault scripts: ordered fault events injected into a run, loaded from
//! JSON Lines.

use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Fault {
    /// Flip a byte of a stored block at a simulated time; validation must
    /// catch it downstream.
    Tamper {
        node: String,
        block_index: usize,
        at_time_s: u64,
    },
    /// Substitute a corrupted batch for this node's submission in one round.
    ByzantineSubmission { node: String, round: u64 },
    /// The center becomes unavailable; its unvoted citizens are reassigned
    /// to the nearest center.
    CenterDown { center: String, at_time_s: u64 },
    /// The node's submission for one round never arrives.
    DropSubmission { node: String, round: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultScript {
    pub faults: Vec<Fault>,
}

impl FaultScript {
    pub fn empty() -> Self {
        FaultScript::default()
    }

    pub fn parse_jsonl<R: BufRead>(r: R) -> anyhow::Result<Self> {
        let mut faults = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fault: Fault = serde_json::from_str(&line)
                .map_err(|e| anyhow::anyhow!("fault script line {}: {e}", i + 1))?;
            faults.push(fault);
        }
        Ok(FaultScript { faults })
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let file =
            std::fs::File::open(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        Self::parse_jsonl(std::io::BufReader::new(file))
    }

    /// Canonical JSONL rendering (for the run directory copy).
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for fault in &self.faults {
            out.push_str(&serde_json::to_string(fault).expect("fault serialization"));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripts_round_trip_through_jsonl() {
        let script = FaultScript {
            faults: vec![
                Fault::Tamper {
                    node: "C00-B00".into(),
                    block_index: 3,
                    at_time_s: 1000,
                },
                Fault::ByzantineSubmission {
                    node: "C00-B01".into(),
                    round: 0,
                },
                Fault::CenterDown {
                    center: "C01-B02".into(),
                    at_time_s: 14_000,
                },
                Fault::DropSubmission {
                    node: "C00-B02".into(),
                    round: 2,
                },
            ],
        };
        let text = script.to_jsonl();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("{\"kind\":\"tamper\""));
        let back = FaultScript::parse_jsonl(text.as_bytes()).unwrap();
        assert_eq!(back, script);
    }

    #[test]
    fn unknown_kinds_are_rejected() {
        assert!(FaultScript::parse_jsonl("{\"kind\":\"meteor\"}".as_bytes()).is_err());
    }
}
