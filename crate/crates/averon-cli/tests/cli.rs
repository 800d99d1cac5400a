//! End-to-end runs of the compiled binary against the bundled example
//! systems. Everything goes through `std::process::Command`, so exit codes
//! and on-disk artifacts are exercised exactly as a user sees them.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use averon_core::report::check_seal;
use tempfile::tempdir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn averon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_averon"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn analyze_damped(out: &Path, guess: &str) -> Output {
    averon(&[
        "analyze",
        fixture("damped_axis.avsys").to_str().unwrap(),
        "--zero-guess",
        guess,
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn analyze_reports_a_stable_verdict_with_the_decisive_coefficient() {
    let dir = tempdir().unwrap();
    let o = analyze_damped(dir.path(), "4,1");
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("verdict Stable"), "stdout: {text}");
    assert!(text.contains("decisive coefficient -4.503614e2"), "stdout: {text}");
    assert!(text.contains("(order 1)"), "stdout: {text}");

    let report = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    check_seal(&report).expect("fresh report seals");
    let doc: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(doc["tool"]["name"], "averon");
    assert_eq!(doc["analyses"][0]["stability"]["verdict"], "Stable");
    assert!(doc["checksum"].as_str().unwrap().starts_with("fnv1a64:"));
}

#[test]
fn the_mirrored_zero_gets_its_own_verdict() {
    let dir = tempdir().unwrap();
    let o = analyze_damped(dir.path(), "4,-1");
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("zero (4.000000, -1.000000)"), "stdout: {text}");
    assert!(text.contains("decisive coefficient -4.205905e2"), "stdout: {text}");
}

#[test]
fn analyze_polishes_the_resonant_zero_from_a_guess() {
    let dir = tempdir().unwrap();
    let o = averon(&[
        "analyze",
        fixture("resonant_pair.avsys").to_str().unwrap(),
        "--zero-guess",
        "1,1,1.5708",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("verdict Stable"), "stdout: {text}");
    assert!(text.contains("decisive coefficient -2.291278e1"), "stdout: {text}");
}

#[test]
fn csv_format_writes_the_branch_table() {
    let dir = tempdir().unwrap();
    let o = averon(&[
        "analyze",
        fixture("damped_axis.avsys").to_str().unwrap(),
        "--zero-guess",
        "4,1",
        "--format",
        "csv",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("branches.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(header, "analysis,kind,branch,order,re,im,indicator");
    assert!(csv.lines().any(|l| l.contains("exponent")), "csv: {csv}");
}

#[test]
fn report_output_is_byte_identical_across_runs() {
    let d1 = tempdir().unwrap();
    let d2 = tempdir().unwrap();
    assert_eq!(analyze_damped(d1.path(), "4,1").status.code(), Some(0));
    assert_eq!(analyze_damped(d2.path(), "4,1").status.code(), Some(0));
    let a = std::fs::read(d1.path().join("report.json")).unwrap();
    let b = std::fs::read(d2.path().join("report.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn missing_input_file_exits_2() {
    let o = averon(&["analyze", "/nonexistent/sys.avsys"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("averon:"), "stderr: {}", stderr(&o));
}

#[test]
fn unknown_parameter_exits_2() {
    let dir = tempdir().unwrap();
    let o = averon(&[
        "analyze",
        fixture("damped_axis.avsys").to_str().unwrap(),
        "--param",
        "nope=1",
        "--zero-guess",
        "4,1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown parameter"), "stderr: {}", stderr(&o));
}

#[test]
fn malformed_range_exits_2() {
    let dir = tempdir().unwrap();
    let o = averon(&[
        "sweep",
        fixture("damped_axis.avsys").to_str().unwrap(),
        "--sweep",
        "b",
        "--range",
        "1:2",
        "--zero-guess",
        "4,1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("LO:HI:COUNT"), "stderr: {}", stderr(&o));
}

#[test]
fn a_guess_far_from_any_zero_exits_3() {
    let dir = tempdir().unwrap();
    let o = analyze_damped(dir.path(), "9,9");
    assert_eq!(o.status.code(), Some(3), "stderr: {}", stderr(&o));
}

#[test]
fn verify_agrees_with_the_shooting_runs() {
    let dir = tempdir().unwrap();
    let o = averon(&[
        "verify",
        fixture("damped_axis.avsys").to_str().unwrap(),
        "--eps",
        "0.02",
        "--zero-guess",
        "4,1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    let text = stdout(&o);
    // a lone --eps expands to a three point dyadic sweep
    assert_eq!(text.matches("-> Match").count(), 3, "stdout: {text}");
    assert!(text.contains("fitted order"), "stdout: {text}");

    let verify = std::fs::read_to_string(dir.path().join("verify.json")).unwrap();
    check_seal(&verify).expect("verify report seals");
    let doc: serde_json::Value = serde_json::from_str(&verify).unwrap();
    assert_eq!(doc["agreement"]["all_agree"], true);

    let moduli = std::fs::read_to_string(dir.path().join("moduli.csv")).unwrap();
    assert!(moduli.starts_with("eps,branch,predicted_modulus,direct_modulus,gap\n"));
    let attraction = std::fs::read_to_string(dir.path().join("attraction.csv")).unwrap();
    assert!(attraction.lines().count() > 100, "attraction iterates missing");
}

#[test]
fn verify_against_a_saved_report_round_trips() {
    let dir = tempdir().unwrap();
    assert_eq!(analyze_damped(dir.path(), "4,1").status.code(), Some(0));
    let report = dir.path().join("report.json");
    let o = averon(&[
        "verify",
        fixture("damped_axis.avsys").to_str().unwrap(),
        "--eps",
        "0.02",
        "--against",
        report.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    assert_eq!(stdout(&o).matches("-> Match").count(), 3);
}

#[test]
fn a_tampered_report_is_rejected_with_the_checksum_diagnostic() {
    let dir = tempdir().unwrap();
    assert_eq!(analyze_damped(dir.path(), "4,1").status.code(), Some(0));
    let report = dir.path().join("report.json");
    let text = std::fs::read_to_string(&report).unwrap();
    std::fs::write(&report, text.replacen("Stable", "StablE", 1)).unwrap();
    let o = averon(&[
        "verify",
        fixture("damped_axis.avsys").to_str().unwrap(),
        "--eps",
        "0.02",
        "--against",
        report.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "stderr: {}", stderr(&o));
    assert!(stderr(&o).contains("checksum mismatch"), "stderr: {}", stderr(&o));
}

#[test]
fn sweep_brackets_the_verdict_flip() {
    let dir = tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_averon"))
        .args([
            "sweep",
            fixture("damped_axis.avsys").to_str().unwrap(),
            "--sweep",
            "b",
            "--range",
            "32.5:33:2",
            "--zero-guess",
            "4,1",
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .env("AVERON_THREADS", "2")
        .output()
        .expect("binary runs");
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    // the decisive coefficient is linear in b here, so interpolating the
    // bracket recovers the threshold to many digits
    assert!(stdout(&o).contains("verdict flips near b = 32.9618"), "stdout: {}", stdout(&o));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert!(csv.starts_with("b,verdict,crit_0"), "csv: {csv}");
    assert!(csv.contains("# sign_change b = 3.2961838"), "csv: {csv}");
}

#[test]
fn an_empty_sweep_writes_only_the_header() {
    let dir = tempdir().unwrap();
    let o = averon(&[
        "sweep",
        fixture("damped_axis.avsys").to_str().unwrap(),
        "--sweep",
        "b",
        "--range",
        "1:2:0",
        "--zero-guess",
        "4,1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    assert!(stdout(&o).contains("no verdict change across 0 grid points"));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv, "b,verdict\n");
}
