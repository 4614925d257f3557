//! End-to-end checks of the command-line interface and its exit-code
//! contracts, driving the real binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn votechain() -> Command {
    Command::new(env!("CARGO_BIN_EXE_votechain"))
}

fn desk_config(dir: &Path) -> PathBuf {
    let path = dir.join("desk.conf");
    std::fs::write(
        &path,
        "election_id = E1\n\
         voters = 300\n\
         clusters = 2\n\
         centers_per_cluster = 3\n\
         levels = 2\n\
         zero_bits = 4\n\
         sync_interval_s = 300\n\
         pause_s = 60\n\
         latency_ms = 100\n\
         election_duration_s = 3600\n\
         seed = 42\n",
    )
    .unwrap();
    path
}

fn run_ok(dir: &Path, out_name: &str) -> (PathBuf, Output) {
    let config = desk_config(dir);
    let out = dir.join(out_name);
    let output = votechain()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    (out, output)
}

#[test]
fn run_writes_a_directory_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (out, output) = run_ok(dir.path(), "run-a");
    assert_eq!(output.status.code(), Some(0), "{output:?}");
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("oracle match: exact"));
    assert!(stdout.contains("total votes: 300"));
    assert!(out.join("report.json").exists());
    assert!(out.join("chains").join("C00.jsonl").exists());
}

#[test]
fn run_refuses_missing_config_and_existing_output() {
    let dir = tempfile::tempdir().unwrap();
    let status = votechain()
        .args(["run", "--config"])
        .arg(dir.path().join("nope.conf"))
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(3));

    let (out, first) = run_ok(dir.path(), "run-b");
    assert_eq!(first.status.code(), Some(0));
    let config = dir.path().join("desk.conf");
    let second = votechain()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(second.status.code(), Some(3));
}

#[test]
fn run_guardrail_requires_override_scale() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("big.conf");
    std::fs::write(&config, "voters = 2000000\n").unwrap();
    let output = votechain()
        .args(["run", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&output.stderr).contains("guardrail"));
}

#[test]
fn tally_recounts_and_matches_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = run_ok(dir.path(), "run-c");
    let output = votechain().arg("tally").arg(&out).output().unwrap();
    assert_eq!(output.status.code(), Some(0), "{output:?}");
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("matches report.json: yes"));
    assert!(stdout.contains("total votes: 300"));
    // Nonexistent run directory: missing inputs.
    let missing = votechain()
        .arg("tally")
        .arg(dir.path().join("ghost"))
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn audit_is_clean_on_untouched_exports_and_flags_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = run_ok(dir.path(), "run-d");
    let findings = dir.path().join("findings.json");
    let clean = votechain()
        .arg("audit")
        .arg(&out)
        .arg("--findings-out")
        .arg(&findings)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(clean.status.code(), Some(0), "{clean:?}");
    assert!(String::from_utf8_lossy(&clean.stdout).contains("audit: ok"));
    assert!(findings.exists());

    // Flip one hex digit of the first vote's prev_hash (the genesis digest
    // starts with "7c09...", so this always hits).
    let victim = out.join("chains").join("C00-B01.jsonl");
    let text = std::fs::read_to_string(&victim).unwrap();
    let edited = text.replacen("\"prev_hash\":\"7", "\"prev_hash\":\"8", 1);
    assert_ne!(edited, text);
    std::fs::write(&victim, edited).unwrap();
    let flagged = votechain()
        .arg("audit")
        .arg(&out)
        .arg("--findings-out")
        .arg(dir.path().join("findings2.json"))
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(flagged.status.code(), Some(2), "{flagged:?}");
    assert!(String::from_utf8_lossy(&flagged.stdout).contains("finding"));
}

#[test]
fn audit_single_file_needs_config_and_honors_expect_tip() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = run_ok(dir.path(), "run-e");
    let chain_file = out.join("chains").join("C01.jsonl");
    let no_config = votechain()
        .arg("audit")
        .arg(&chain_file)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(no_config.status.code(), Some(3));

    let config = dir.path().join("desk.conf");
    let ok = votechain()
        .arg("audit")
        .arg(&chain_file)
        .arg("--config")
        .arg(&config)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0), "{ok:?}");

    // A wrong expected tip is a finding.
    let bad_tip = votechain()
        .arg("audit")
        .arg(&chain_file)
        .arg("--config")
        .arg(&config)
        .arg("--expect-tip")
        .arg("0".repeat(64))
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(bad_tip.status.code(), Some(2));
}

#[test]
fn audit_reports_parse_errors_with_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = run_ok(dir.path(), "run-f");
    let victim = out.join("chains").join("C00-B00.jsonl");
    std::fs::write(&victim, "not json at all\n").unwrap();
    let output = votechain()
        .arg("audit")
        .arg(&out)
        .arg("--findings-out")
        .arg(dir.path().join("findings3.json"))
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
}

#[test]
fn tamper_detects_every_mutation() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = run_ok(dir.path(), "run-g");
    let output = votechain()
        .arg("tamper")
        .arg(&out)
        .args(["--mutations", "120", "--seed", "7"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{output:?}");
    assert!(String::from_utf8_lossy(&output.stdout).contains("detection rate 1.0000"));

    // Zero mutations: vacuously perfect detection.
    let vacuous = votechain()
        .arg("tamper")
        .arg(&out)
        .args(["--mutations", "0"])
        .output()
        .unwrap();
    assert_eq!(vacuous.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&vacuous.stdout).contains("detection rate 1.0000"));

    let missing = votechain()
        .arg("tamper")
        .arg(dir.path().join("ghost"))
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(3));

    // A run directory without exports is missing inputs too.
    let hollow = dir.path().join("hollow");
    std::fs::create_dir_all(hollow.join("chains")).unwrap();
    std::fs::copy(out.join("config.txt"), hollow.join("config.txt")).unwrap();
    std::fs::copy(out.join("tips.json"), hollow.join("tips.json")).unwrap();
    let empty = votechain().arg("tamper").arg(&hollow).output().unwrap();
    assert_eq!(empty.status.code(), Some(3));
}

#[test]
fn run_defaults_to_the_env_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let config = desk_config(dir.path());
    let base = dir.path().join("outputs");
    let output = votechain()
        .args(["run", "--config"])
        .arg(&config)
        .env("VOTECHAIN_OUT", &base)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{output:?}");
    assert!(base.join("E1-s42").join("report.json").exists());
}

#[test]
fn flagged_incidents_exit_four() {
    let dir = tempfile::tempdir().unwrap();
    let config = desk_config(dir.path());
    // Tampering a pending block stalls its cluster at the retry cap: the run
    // finishes but flags incidents.
    let faults = dir.path().join("faults.jsonl");
    std::fs::write(
        &faults,
        "{\"kind\":\"tamper\",\"node\":\"C00-B00\",\"block_index\":0,\"at_time_s\":200}\n",
    )
    .unwrap();
    let output = votechain()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--faults")
        .arg(&faults)
        .arg("--out")
        .arg(dir.path().join("run-i"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(4), "{output:?}");
    assert!(String::from_utf8_lossy(&output.stdout).contains("incidents flagged"));
}

#[test]
fn identical_runs_are_byte_identical_outside_meta() {
    let dir = tempfile::tempdir().unwrap();
    let (out_a, _) = run_ok(dir.path(), "run-h1");
    let (out_b, status) = run_ok(dir.path(), "run-h2");
    assert_eq!(status.status.code(), Some(0));
    let mut files_a = list_files(&out_a);
    let mut files_b = list_files(&out_b);
    files_a.sort();
    files_b.sort();
    assert_eq!(files_a, files_b);
    for rel in files_a {
        if rel.ends_with("meta.json") {
            continue;
        }
        let a = std::fs::read(out_a.join(&rel)).unwrap();
        let b = std::fs::read(out_b.join(&rel)).unwrap();
        assert_eq!(a, b, "{rel} differs between identical runs");
    }
}

fn list_files(root: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(
                    path.strip_prefix(root)
                        .unwrap()
                        .to_string_lossy()
                        .into_owned(),
                );
            }
        }
    }
    out
}
