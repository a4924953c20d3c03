//! Command-line behaviour of the `sotta` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const SMALL: [&str; 4] = [
    "--set",
    "stream.benign_count=200",
    "--set",
    "pretrain.epochs=5",
];

fn sotta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sotta"))
        .args(args)
        .env("SOTTA_THREADS", "2")
        .output()
        .unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

/// A checkpoint pretrained once with the small config.
fn checkpoint() -> &'static (tempfile::TempDir, PathBuf) {
    static CKPT: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    CKPT.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("source.ckpt");
        let mut args = vec!["pretrain", "--out", path.to_str().unwrap()];
        args.extend(SMALL);
        let out = sotta(&args);
        assert!(out.status.success(), "{}", text(&out.stderr));
        (dir, path)
    })
}

fn with_small(mut args: Vec<&str>) -> Vec<&str> {
    args.extend(SMALL);
    args
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_one_row() {
    let (dir, ckpt) = checkpoint();
    let csv = dir.path().join("run.csv");
    let out = sotta(&with_small(vec![
        "run",
        "--ckpt",
        path_str(ckpt),
        "--method",
        "sotta",
        "--scenario",
        "near",
        "--out-csv",
        path_str(&csv),
    ]));
    assert!(out.status.success(), "{}", text(&out.stderr));
    let body = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = body.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("scenario,method,seed,benign_acc"));
    assert!(lines[1].starts_with("near,sotta,0,"));
}

#[test]
fn sweep_then_report() {
    let (dir, ckpt) = checkpoint();
    let csv = dir.path().join("sweep.csv");
    let out = sotta(&with_small(vec![
        "sweep",
        "--ckpt",
        path_str(ckpt),
        "--scenarios",
        "noise,benign",
        "--methods",
        "em,sotta",
        "--seeds",
        "0,1",
        "--out-csv",
        path_str(&csv),
    ]));
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert_eq!(
        std::fs::read_to_string(&csv).unwrap().lines().count(),
        1 + 2 * 2 * 2
    );

    let report = sotta(&["report", "--in-csv", path_str(&csv)]);
    assert!(report.status.success());
    let stdout = text(&report.stdout);
    assert!(
        stdout.contains("sotta") && stdout.contains("benign"),
        "{stdout}"
    );
}

#[test]
fn ablations_keyword_expands_to_eight_methods() {
    let (dir, ckpt) = checkpoint();
    let csv = dir.path().join("abl.csv");
    let out = sotta(&with_small(vec![
        "sweep",
        "--ckpt",
        path_str(ckpt),
        "--methods",
        "ablations",
        "--seeds",
        "0",
        "--out-csv",
        path_str(&csv),
    ]));
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert_eq!(
        std::fs::read_to_string(&csv).unwrap().lines().count(),
        1 + 8
    );
}

#[test]
fn config_file_and_overrides_are_applied() {
    let (dir, ckpt) = checkpoint();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "# smaller memory\nadapt.memory = 32\nadapt.rho = 0.5\n",
    )
    .unwrap();
    let csv = dir.path().join("cfg.csv");
    let out = sotta(&with_small(vec![
        "run",
        "--ckpt",
        path_str(ckpt),
        "--config",
        path_str(&cfg),
        "--set",
        "adapt.rho=0.2",
        "--out-csv",
        path_str(&csv),
    ]));
    assert!(out.status.success(), "{}", text(&out.stderr));
    let rows = sotta_core::harness::read_csv(&csv).unwrap();
    assert_eq!((rows[0].n_mem, rows[0].rho), (32, 0.2));
}

#[test]
fn bad_config_reports_key_and_line() {
    let (dir, ckpt) = checkpoint();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "adapt.m = 0.2\nadapt.rho = lots\n").unwrap();
    let csv = dir.path().join("never.csv");
    let out = sotta(&[
        "run",
        "--ckpt",
        path_str(ckpt),
        "--config",
        path_str(&cfg),
        "--out-csv",
        path_str(&csv),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    assert!(err.contains("adapt.rho") && err.contains('2'), "{err}");
    assert!(!csv.exists());
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let (dir, ckpt) = checkpoint();
    let csv = dir.path().join("never.csv");
    let out = sotta(&[
        "run",
        "--ckpt",
        path_str(ckpt),
        "--set",
        "net.hidden=32,32",
        "--out-csv",
        path_str(&csv),
    ]);
    assert_ne!(out.status.code(), Some(0));
    assert!(!csv.exists());
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(sotta(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(sotta(&["run", "--out-csv", "x.csv"]).status.code(), Some(1));
    assert_eq!(sotta(&["--help"]).status.code(), Some(0));
    let (_, ckpt) = checkpoint();
    let out = sotta(&[
        "sweep",
        "--ckpt",
        path_str(ckpt),
        "--methods",
        "magic",
        "--out-csv",
        "x.csv",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_on_a_few_networks() {
    let out = sotta(&["gradcheck", "--nets", "10", "--seed", "3"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("10 networks"));
}
