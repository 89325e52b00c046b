use std::path::Path;
use std::process::Command;

use adsorbtext::structures::write_structures;
use adsorbtext::synthetic::synthetic_structures;
use adsorbtext_cli::manifest::{manifest_path, sha256_file, RunManifest};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_adsorbtext"))
}

fn run_in(dir: &Path, args: &[&str]) -> std::process::Output {
    bin().args(args).current_dir(dir).output().unwrap()
}

fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_structures(&d.join("s.jsonl"), &synthetic_structures(24, 2).unwrap()).unwrap();
    std::fs::write(
        d.join("tiny.cfg"),
        "d_model = 8\nn_heads = 2\nn_layers = 1\nd_ff = 16\nmax_len = 48\nepochs = 1\nbatch_size = 8\n",
    )
    .unwrap();
    for args in [
        ["convert", "--in", "s.jsonl", "--out", "r.jsonl"],
        ["vocab", "--in", "r.jsonl", "--out", "v.txt"],
    ] {
        assert!(run_in(d, &args).status.success(), "{args:?}");
    }
    dir
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(bin().arg("transmogrify").output().unwrap().status.code(), Some(2));
    assert_eq!(
        bin().args(["convert", "--in", "x"]).output().unwrap().status.code(),
        Some(2)
    );
    assert_eq!(
        adsorbtext_cli::run([
            "adsorbtext",
            "analyze-duplicates",
            "--records",
            "r",
            "--out",
            "o",
            "--checkpoint",
            "c"
        ]),
        2
    );
}

#[test]
fn failures_exit_1_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["convert", "--in", "missing.jsonl", "--out", "r.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert!(!dir.path().join("r.jsonl").exists());
}

#[test]
fn bad_config_is_rejected() {
    let dir = prepared();
    let d = dir.path();
    let base = [
        "finetune",
        "--records",
        "r.jsonl",
        "--vocab",
        "v.txt",
        "--out",
        "m.ckpt",
        "--config",
        "tiny.cfg",
    ];
    for bad in ["colour=blue", "lr=fast", "batch_size=0", "noequals"] {
        let mut a = base.to_vec();
        a.extend(["--set", bad]);
        assert_eq!(run_in(d, &a).status.code(), Some(1), "{bad}");
    }
    assert!(!d.join("m.ckpt").exists());
}

#[test]
fn manifest_records_resolved_config_and_hashes() {
    let dir = prepared();
    let d = dir.path();
    let out = run_in(
        d,
        &[
            "finetune",
            "--records",
            "r.jsonl",
            "--vocab",
            "v.txt",
            "--out",
            "m.ckpt",
            "--config",
            "tiny.cfg",
            "--set",
            "epochs=2",
            "--set",
            "d_ff=24",
            "--seed",
            "9",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m: RunManifest = serde_json::from_slice(&std::fs::read(manifest_path(&d.join("m.ckpt"))).unwrap()).unwrap();
    assert_eq!(m.command, "finetune");
    assert_eq!(m.seed, Some(9));
    assert_eq!(m.config["epochs"], "2");
    assert_eq!(m.config["d_ff"], "24");
    assert_eq!(m.config["d_model"], "8");
    for (path, hash) in &m.artifact_hashes {
        assert_eq!(&sha256_file(&d.join(path)).unwrap(), hash, "{path}");
    }
    assert!(m.artifact_hashes.contains_key("r.jsonl"));
    assert!(d.join("m.ckpt.log.csv").exists());
}

#[test]
fn replaying_manifest_args_reproduces_the_output() {
    let dir = prepared();
    let d = dir.path();
    let args = [
        "pretrain-mlm",
        "--records",
        "r.jsonl",
        "--vocab",
        "v.txt",
        "--out",
        "p.ckpt",
        "--config",
        "tiny.cfg",
    ];
    assert!(run_in(d, &args).status.success());
    let first = std::fs::read(d.join("p.ckpt")).unwrap();
    let m: RunManifest = serde_json::from_slice(&std::fs::read(manifest_path(&d.join("p.ckpt"))).unwrap()).unwrap();
    std::fs::remove_file(d.join("p.ckpt")).unwrap();
    assert!(run_in(d, &m.args[1..].iter().map(String::as_str).collect::<Vec<_>>())
        .status
        .success());
    assert_eq!(std::fs::read(d.join("p.ckpt")).unwrap(), first);
}

#[test]
fn eval_prints_summary_and_writes_reports() {
    let dir = prepared();
    let d = dir.path();
    assert!(run_in(
        d,
        &[
            "finetune",
            "--records",
            "r.jsonl",
            "--vocab",
            "v.txt",
            "--out",
            "m.ckpt",
            "--config",
            "tiny.cfg"
        ]
    )
    .status
    .success());
    let out = run_in(
        d,
        &[
            "eval",
            "--checkpoint",
            "m.ckpt",
            "--records",
            "r.jsonl",
            "--vocab",
            "v.txt",
        ],
    );
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["records", "labeled", "mae_ev", "r2", "mae_duplicate_ev", "count_unique"] {
        assert!(text.lines().any(|l| l.starts_with(key)), "missing {key} in\n{text}");
    }
    let parity = std::fs::read_to_string(d.join("m.ckpt.parity.csv")).unwrap();
    assert_eq!(parity.lines().count(), 25);
    assert!(d.join("m.ckpt.metrics.csv").exists());
}

#[test]
fn gap_rejects_conflicting_graph_width() {
    let dir = prepared();
    let d = dir.path();
    assert!(run_in(d, &["synth-graphemb", "--in", "s.jsonl", "--out", "g.jsonl"])
        .status
        .success());
    let base = [
        "pretrain-gap",
        "--records",
        "r.jsonl",
        "--vocab",
        "v.txt",
        "--graphemb",
        "g.jsonl",
        "--out",
        "g.ckpt",
        "--config",
        "tiny.cfg",
    ];
    let mut bad = base.to_vec();
    bad.extend(["--set", "d_graph=5"]);
    assert_eq!(run_in(d, &bad).status.code(), Some(1));
    assert!(run_in(d, &base).status.success());
}
