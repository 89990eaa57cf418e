//! End-to-end tests against the compiled binary.

use std::path::Path;
use std::process::{Command, Output};

fn moepim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moepim"))
        .args(args)
        .current_dir(dir)
        .env_remove("MOEPIM_CONFIG")
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(dir: &Path, rel: &str) -> String {
    std::fs::read_to_string(dir.join(rel)).unwrap_or_else(|e| panic!("read {rel}: {e}"))
}

fn gen_default_trace(dir: &Path) {
    let out = moepim(
        dir,
        &[
            "gen-trace", "--tokens", "96", "--experts", "16", "--skew", "0.5", "--seed", "7",
            "--prompt-len", "32", "--out", "t.trace",
        ],
    );
    assert_code(&out, 0);
}

#[test]
fn gen_trace_is_deterministic_and_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    gen_default_trace(dir.path());
    let first = read(dir.path(), "t.trace");
    gen_default_trace(dir.path());
    assert_eq!(first, read(dir.path(), "t.trace"));

    // Magic line, three header fields, then one row per token.
    assert_eq!(first.lines().count(), 4 + 96);
    assert!(first.starts_with("moepim-trace v1\n"));
}

#[test]
fn gen_trace_rejects_zero_experts() {
    let dir = tempfile::tempdir().unwrap();
    let out = moepim(
        dir.path(),
        &["gen-trace", "--tokens", "4", "--experts", "0", "--out", "z.trace"],
    );
    assert_code(&out, 1);
}

#[test]
fn run_writes_parseable_byte_stable_reports() {
    let dir = tempfile::tempdir().unwrap();
    gen_default_trace(dir.path());
    let args = ["run", "--trace", "t.trace", "--label", "demo", "--out", "out"];
    assert_code(&moepim(dir.path(), &args), 0);
    let json = read(dir.path(), "out/demo.json");
    let parsed: serde_json::Value = serde_json::from_str(&json).expect("report parses");
    assert_eq!(parsed["label"], "demo");
    assert!(parsed["report"]["latency_ns"].as_f64().unwrap() > 0.0);

    let csv = read(dir.path(), "out/demo.steps.csv");
    assert_eq!(csv.lines().count(), 1 + 8, "header plus one row per decode step");

    assert_code(&moepim(dir.path(), &args), 0);
    assert_eq!(json, read(dir.path(), "out/demo.json"));
    assert_eq!(csv, read(dir.path(), "out/demo.steps.csv"));
}

#[test]
fn run_missing_trace_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = moepim(dir.path(), &["run", "--trace", "missing.trace"]);
    assert_code(&out, 2);
}

#[test]
fn run_rejects_invalid_config_as_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    gen_default_trace(dir.path());
    std::fs::write(dir.path().join("bad.toml"), "[model]\nnum_experts = 0\n").unwrap();
    let out = moepim(
        dir.path(),
        &["run", "--config", "bad.toml", "--trace", "t.trace"],
    );
    assert_code(&out, 1);
}

#[test]
fn dump_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = moepim(dir.path(), &["dump-config"]);
    assert_code(&out, 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let configs = moepim::config::Configs::from_toml(&text).expect("dump parses back");
    assert_eq!(configs, moepim::config::Configs::default());
}

#[test]
fn strategy_grid_sweep_emits_comparison_tables() {
    let dir = tempfile::tempdir().unwrap();
    gen_default_trace(dir.path());
    let out = moepim(
        dir.path(),
        &["sweep", "--trace", "t.trace", "--strategy-grid", "--baseline", "B", "--out", "g"],
    );
    assert_code(&out, 0);

    let comparison = read(dir.path(), "g/comparison.csv");
    let mut lines = comparison.lines();
    assert!(lines.next().unwrap().starts_with("label,latency_ns"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 9);
    assert!(rows[0].starts_with("B,"));
    // The baseline compares to itself with unit ratios.
    let fields: Vec<&str> = rows[0].split(',').collect();
    assert_eq!(&fields[6..9], &["1", "1", "1"]);

    let gen_latency = read(dir.path(), "g/gen_latency.csv");
    assert_eq!(gen_latency.lines().count(), 1 + 9);

    let bad = moepim(
        dir.path(),
        &["sweep", "--trace", "t.trace", "--strategy-grid", "--baseline", "NOPE", "--out", "g2"],
    );
    assert_code(&bad, 1);
}

#[test]
fn parallel_sweep_matches_serial_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    gen_default_trace(dir.path());
    let axes = [
        "sweep", "--trace", "t.trace", "--axis", "gen_len=4,8", "--axis", "kv_cache=true,false",
    ];
    let serial: Vec<&str> = axes.iter().copied().chain(["--out", "s", "--jobs", "1"]).collect();
    let parallel: Vec<&str> = axes.iter().copied().chain(["--out", "p", "--jobs", "4"]).collect();
    assert_code(&moepim(dir.path(), &serial), 0);
    assert_code(&moepim(dir.path(), &parallel), 0);
    for file in ["sweep.json", "comparison.csv", "gen_latency.csv"] {
        assert_eq!(
            read(dir.path(), &format!("s/{file}")),
            read(dir.path(), &format!("p/{file}")),
            "{file} differs between --jobs 1 and --jobs 4"
        );
    }
}

#[test]
fn sweep_rejects_malformed_axes() {
    let dir = tempfile::tempdir().unwrap();
    gen_default_trace(dir.path());
    for axis in ["bogus=1", "gen_len", "gen_len=", "schedule=sideways", "gen_len=abc"] {
        let out = moepim(
            dir.path(),
            &["sweep", "--trace", "t.trace", "--axis", axis, "--out", "x"],
        );
        assert_code(&out, 1);
    }
}

#[test]
fn help_exits_zero_and_unknown_flags_do_not() {
    let dir = tempfile::tempdir().unwrap();
    assert_code(&moepim(dir.path(), &["--help"]), 0);
    assert_code(&moepim(dir.path(), &["run", "--help"]), 0);
    assert_code(&moepim(dir.path(), &["--frobnicate"]), 1);
    assert_code(&moepim(dir.path(), &[]), 1);
}
