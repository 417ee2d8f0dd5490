//! End-to-end tests of the `gatenav` binary, including the sweep
//! determinism acceptance criterion.

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn gatenav(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gatenav"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn mini_track() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mini.toml");
    fs::write(
        &path,
        r#"
name = "mini"

[[gates]]
position = [4.0, 0.0, 1.5]
yaw = 0.0

[[gates]]
position = [9.0, 5.0, 1.5]
yaw = 1.5707963267948966

[[gates]]
position = [4.0, 10.0, 1.5]
yaw = 3.141592653589793

[[gates]]
position = [-1.0, 5.0, 1.5]
yaw = -1.5707963267948966

[sim]
timeout = 120.0
required_laps = 1
"#,
    )
    .unwrap();
    (dir, path)
}

/// Criterion 10: repeating a sweep invocation with the same base seed
/// yields byte-identical CSV output.
#[test]
fn criterion_10_sweep_determinism() {
    let (dir, track) = mini_track();
    let out_a = dir.path().join("a.csv");
    let out_b = dir.path().join("b.csv");
    for out in [&out_a, &out_b] {
        let status = gatenav(&[
            "sweep",
            "--track",
            track.to_str().unwrap(),
            "--speeds",
            "1.5",
            "--rhos",
            "0,1",
            "--seeds",
            "2",
            "--modes",
            "full,baseline",
            "--base-seed",
            "11",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(status.status.success(), "{status:?}");
    }
    let a = fs::read(&out_a).unwrap();
    let b = fs::read(&out_b).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b, "sweep output differs between identical invocations");
    println!("criterion 10 (sweep determinism): PASS ({} bytes identical)", a.len());
}

#[test]
fn sweep_csv_has_stable_schema() {
    let (dir, track) = mini_track();
    let out = dir.path().join("r.csv");
    let status = gatenav(&[
        "sweep",
        "--track",
        track.to_str().unwrap(),
        "--speeds",
        "1.5",
        "--rhos",
        "0",
        "--seeds",
        "1",
        "--base-seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(status.status.success());
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "mode,speed_mps,rho_m,seed,outcome,gates_passed,laps,success_fraction,elapsed_s"
    );
    let row = lines.next().unwrap();
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields.len(), 9);
    assert_eq!(fields[0], "full");
    assert_eq!(fields[1], "1.50");
    assert_eq!(fields[2], "0.00");
    assert_eq!(fields[3], "3");
    assert!(["completed", "crashed", "missed", "timeout"].contains(&fields[4]));
    // Pinned precisions: success 4 decimals, elapsed 3 decimals.
    assert_eq!(fields[7].split('.').nth(1).unwrap().len(), 4);
    assert_eq!(fields[8].split('.').nth(1).unwrap().len(), 3);
}

#[test]
fn run_writes_trajectory_log() {
    let (dir, track) = mini_track();
    let log = dir.path().join("run.jsonl");
    let out = gatenav(&[
        "run",
        "--track",
        track.to_str().unwrap(),
        "--speed",
        "1.5",
        "--seed",
        "1",
        "--log",
        log.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("outcome="), "{stdout}");
    let text = fs::read_to_string(&log).unwrap();
    let first = text.lines().next().unwrap();
    let record: serde_json::Value = serde_json::from_str(first).unwrap();
    for key in ["t", "true_p", "vio_p", "belief_means", "input", "events"] {
        assert!(record.get(key).is_some(), "log record missing {key}");
    }
}

#[test]
fn check_validates_and_reports_errors() {
    let (dir, track) = mini_track();
    let ok = gatenav(&["check", "--track", track.to_str().unwrap()]);
    assert!(ok.status.success());
    assert!(String::from_utf8(ok.stdout).unwrap().contains("ok: track `mini`"));

    // Semantic error: config exit code 2.
    let bad = dir.path().join("bad.toml");
    fs::write(
        &bad,
        "name = \"bad\"\n\n[[gates]]\nposition = [1.0, 0.0, 1.5]\nyaw = 0.0\naperture = [-1.0, 0.75]\n\n[[gates]]\nposition = [5.0, 0.0, 1.5]\nyaw = 0.0\n",
    )
    .unwrap();
    let out = gatenav(&["check", "--track", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("aperture"), "{stderr}");

    // Unknown key: also a config error.
    let unknown = dir.path().join("unknown.toml");
    fs::write(
        &unknown,
        "name = \"u\"\ncolour = \"red\"\n\n[[gates]]\nposition = [1.0, 0.0, 1.5]\nyaw = 0.0\n\n[[gates]]\nposition = [5.0, 0.0, 1.5]\nyaw = 0.0\n",
    )
    .unwrap();
    let out = gatenav(&["check", "--track", unknown.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    // Missing file: config error as well.
    let out = gatenav(&["check", "--track", "/nonexistent/track.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bundled_tracks_are_valid() {
    for name in ["oval", "figure", "compact"] {
        let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
            .join("../../tracks")
            .join(format!("{name}.toml"));
        let out = gatenav(&["check", "--track", path.to_str().unwrap()]);
        assert!(out.status.success(), "{name} failed validation");
    }
}
