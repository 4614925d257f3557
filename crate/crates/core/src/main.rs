//! Command-line entry point: run elections, recount, audit exports, and
//! measure tamper detection.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use votechain::audit::{audit_chain_file, audit_run_dir, tamper_trials, AuditConfig, AuditReport};
use votechain::codec::read_chain;
use votechain::config::ElectionConfig;
use votechain::hash::HashDigest;
use votechain::sim::{self, FaultScript};
use votechain::tally::{flatten_many, tally, TallyResult, Winner};

/// Base directory for run outputs when --out is not given.
const OUT_ENV: &str = "VOTECHAIN_OUT";

#[derive(Parser)]
#[command(
    name = "votechain",
    version,
    about = "Hierarchical blockchain e-voting simulator and audit toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulated election and write a run directory.
    Run {
        /// Election config file (key = value lines).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's RNG seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Fault script (JSON Lines).
        #[arg(long)]
        faults: Option<PathBuf>,
        /// Run directory to create (default: $VOTECHAIN_OUT or ./runs).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Allow runs beyond the desk-scale voter guardrail.
        #[arg(long)]
        override_scale: bool,
    },
    /// Recount a run directory from its exported chains.
    Tally { run_dir: PathBuf },
    /// Audit a chain export file or a whole run directory.
    Audit {
        /// Chain file (.jsonl) or run directory.
        target: PathBuf,
        /// Election config; required when auditing a bare chain file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Expected tip hash (64 hex chars) for a bare chain file.
        #[arg(long)]
        expect_tip: Option<String>,
        /// Where to write the JSON findings (default: ./<target>.findings.json).
        #[arg(long)]
        findings_out: Option<PathBuf>,
    },
    /// Apply seeded single-byte mutations to export copies and report the
    /// audit detection rate.
    Tamper {
        run_dir: PathBuf,
        #[arg(long, default_value_t = 1000)]
        mutations: u64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn main() {
    std::process::exit(dispatch(Cli::parse()));
}

fn dispatch(cli: Cli) -> i32 {
    match cli.command {
        Command::Run {
            config,
            seed,
            faults,
            out,
            override_scale,
        } => cmd_run(&config, seed, faults.as_deref(), out, override_scale),
        Command::Tally { run_dir } => cmd_tally(&run_dir),
        Command::Audit {
            target,
            config,
            expect_tip,
            findings_out,
        } => cmd_audit(
            &target,
            config.as_deref(),
            expect_tip.as_deref(),
            findings_out,
        ),
        Command::Tamper {
            run_dir,
            mutations,
            seed,
        } => cmd_tamper(&run_dir, mutations, seed),
    }
}

fn cmd_run(
    config_path: &Path,
    seed: Option<u64>,
    faults_path: Option<&Path>,
    out: Option<PathBuf>,
    override_scale: bool,
) -> i32 {
    let mut config = match ElectionConfig::load(config_path) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("config error: {e}");
            return 3;
        }
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.override_scale = config.override_scale || override_scale;
    if let Err(e) = config.validate() {
        eprintln!("config error: {e}");
        return 3;
    }
    let faults = match faults_path {
        Some(path) => match FaultScript::load(path) {
            Ok(faults) => faults,
            Err(e) => {
                eprintln!("fault script error: {e}");
                return 3;
            }
        },
        None => FaultScript::empty(),
    };
    let out_dir = match out {
        Some(dir) => dir,
        None => {
            let base = std::env::var(OUT_ENV).unwrap_or_else(|_| "runs".to_string());
            Path::new(&base).join(format!("{}-s{}", config.election_id, config.seed))
        }
    };
    if out_dir.exists()
        && out_dir
            .read_dir()
            .map(|mut d| d.next().is_some())
            .unwrap_or(true)
    {
        eprintln!("output directory {} already exists", out_dir.display());
        return 3;
    }

    let output = match sim::run(&config, &faults, Some(&out_dir)) {
        Ok(output) => output,
        Err(e) => {
            eprintln!("run failed: {e}");
            return 3;
        }
    };
    println!("run directory: {}", out_dir.display());
    print_tally(&output.tally);
    println!(
        "oracle match: {}",
        if output.report.tallies_match() {
            "exact"
        } else {
            "MISMATCH"
        }
    );
    if output.report.incidents.is_empty() {
        0
    } else {
        println!("incidents flagged: {}", output.report.incidents.len());
        for incident in &output.report.incidents {
            println!("  {}", serde_json::to_string(incident).unwrap_or_default());
        }
        4
    }
}

/// Top-level chain ids for a config: cluster chains at two levels, a single
/// `L<k>` chain above that, or the center chains for single-level setups.
fn top_chain_ids(config: &ElectionConfig) -> Vec<String> {
    if config.levels == 1 {
        sim::all_box_ids(config)
    } else if config.levels == 2 {
        sim::cluster_ids(config)
    } else {
        vec![sim::upper_chain_id(config.levels - 1)]
    }
}

fn cmd_tally(run_dir: &Path) -> i32 {
    let config = match ElectionConfig::load(&run_dir.join("config.txt")) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("cannot read run directory: {e}");
            return 3;
        }
    };
    let audit_cfg = match AuditConfig::from_election(&config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("cannot rebuild public election data: {e}");
            return 3;
        }
    };
    let mut chains = Vec::new();
    for id in top_chain_ids(&config) {
        let path = run_dir.join("chains").join(format!("{id}.jsonl"));
        let file = match std::fs::File::open(&path) {
            Ok(file) => file,
            Err(e) => {
                eprintln!("cannot read {}: {e}", path.display());
                return 3;
            }
        };
        match read_chain(std::io::BufReader::new(file)) {
            Ok(chain) => chains.push(chain),
            Err(e) => {
                eprintln!("{}: {e}", path.display());
                return 3;
            }
        }
    }
    let refs: Vec<&votechain::Chain> = chains.iter().collect();
    let result = flatten_many(&refs, &audit_cfg.patterns)
        .and_then(|votes| tally(&votes, &audit_cfg.region_map, &audit_cfg.candidates));
    let result = match result {
        Ok(result) => result,
        Err(e) => {
            eprintln!("recount failed: {e}");
            return 2;
        }
    };
    print_tally(&result);

    // Cross-check against the run's own report when it is present.
    let report_path = run_dir.join("report.json");
    if let Ok(report_text) = std::fs::read_to_string(&report_path) {
        if let Ok(report) = serde_json::from_str::<serde_json::Value>(&report_text) {
            let recounted = serde_json::to_value(&result.per_region).unwrap_or_default();
            if report.get("reported_tally") == Some(&recounted) {
                println!("matches report.json: yes");
            } else {
                println!("matches report.json: NO");
                return 2;
            }
        }
    }
    0
}

fn cmd_audit(
    target: &Path,
    config_path: Option<&Path>,
    expect_tip: Option<&str>,
    findings_out: Option<PathBuf>,
) -> i32 {
    if !target.exists() {
        eprintln!("{} does not exist", target.display());
        return 3;
    }
    let report = if target.is_dir() {
        match audit_run_dir(target) {
            Ok(report) => report,
            Err(e) => {
                eprintln!("audit failed: {e}");
                return 3;
            }
        }
    } else {
        let Some(config_path) = config_path else {
            eprintln!("--config is required when auditing a single chain file");
            return 3;
        };
        let config = match ElectionConfig::load(config_path) {
            Ok(config) => config,
            Err(e) => {
                eprintln!("config error: {e}");
                return 3;
            }
        };
        let cfg = match AuditConfig::from_election(&config) {
            Ok(cfg) => cfg,
            Err(e) => {
                eprintln!("cannot rebuild public election data: {e}");
                return 3;
            }
        };
        let expected_tip = match expect_tip {
            Some(hex) => match HashDigest::from_hex(hex) {
                Ok(digest) => Some(digest),
                Err(e) => {
                    eprintln!("--expect-tip: {e}");
                    return 3;
                }
            },
            None => None,
        };
        let (_, findings) = audit_chain_file(target, &cfg, expected_tip.as_ref());
        AuditReport {
            findings,
            tally: None,
        }
    };

    if report.is_ok() {
        println!("audit: ok");
    } else {
        println!("audit: {} finding(s)", report.findings.len());
        for finding in report.findings.iter().take(20) {
            println!(
                "  {}:{} {:?} {}",
                finding.file, finding.line, finding.code, finding.detail
            );
        }
        if report.findings.len() > 20 {
            println!("  ... and {} more", report.findings.len() - 20);
        }
    }
    if let Some(result) = &report.tally {
        print_tally(result);
    }

    // Findings land outside the audited directory so re-auditing never
    // mutates a run.
    let findings_path = findings_out.unwrap_or_else(|| {
        let stem = target
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "audit".to_string());
        PathBuf::from(format!("{stem}.findings.json"))
    });
    if let Err(e) = std::fs::write(&findings_path, report.to_json()) {
        eprintln!(
            "cannot write findings file {}: {e}",
            findings_path.display()
        );
    } else {
        println!("findings written to {}", findings_path.display());
    }
    report.exit_code()
}

fn cmd_tamper(run_dir: &Path, mutations: u64, seed: u64) -> i32 {
    match tamper_trials(run_dir, mutations, seed) {
        Ok(stats) => {
            println!(
                "tamper trials: {} mutations, {} detected, detection rate {:.4}",
                stats.trials,
                stats.detected,
                stats.detection_rate()
            );
            if stats.detected == stats.trials {
                0
            } else {
                2
            }
        }
        Err(e) => {
            eprintln!("tamper run failed: {e}");
            3
        }
    }
}

fn print_tally(result: &TallyResult) {
    for (region, counts) in &result.per_region {
        let row: Vec<String> = counts.iter().map(|(c, n)| format!("{c}={n}")).collect();
        let verdict = match &result.winners.get(region) {
            Some(Winner::Winner(w)) => format!("winner {w}"),
            Some(Winner::Tie(ts)) => format!("tie [{}]", ts.join(", ")),
            None => "no ballots".to_string(),
        };
        println!("region {region}: {} -> {verdict}", row.join(" "));
    }
    println!("total votes: {}", result.total_votes);
}
