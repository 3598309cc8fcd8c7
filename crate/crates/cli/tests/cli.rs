//! End-to-end checks of the binary's contract: exit codes, locking,
//! idempotence, digest chaining and quarantine, on second-scale configs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gilab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gilab")).args(args).output().expect("spawn gilab")
}

fn write_config(dir: &Path, out: &Path) -> PathBuf {
    let path = dir.join("exp.toml");
    let body = format!(
        r#"output_dir = "{}"
seed = 7
victim_batches = 2

[model]
input = [1, 8, 8]
layers = [
    {{ type = "flatten" }},
    {{ type = "dense", out = 12 }},
    {{ type = "relu" }},
    {{ type = "dense", out = 2 }},
]

[dataset.victim]
kind = "synthetic"
generator = "shapes"
count = 4
channels = 1
height = 8
width = 8
classes = 2

[dataset.surrogate]
kind = "synthetic"
generator = "shapes"
count = 8
channels = 1
height = 8
width = 8
classes = 2

[client]
algorithm = "fed_sgd"
batch_size = 2

[attack]
iterations = 10
lr = 0.1

[guide]
snapshot_iters = [10]
pairs = 4
denoise_iters = [10]

[denoiser]
features = 4
depth = 1
[denoiser.fit]
epochs = 2
batch_size = 4
lr = 0.005
"#,
        out.display()
    );
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn version_and_help_exit_zero() {
    let v = gilab(&["--version"]);
    assert!(v.status.success());
    assert!(String::from_utf8_lossy(&v.stdout).starts_with("gilab "));
    let h = gilab(&["--help"]);
    assert!(h.status.success());
    assert!(String::from_utf8_lossy(&h.stdout).contains("--config"));
}

#[test]
fn unknown_command_and_missing_config_are_config_errors() {
    let bad = gilab(&["explode", "--config", "/nonexistent.toml"]);
    assert_eq!(bad.status.code(), Some(2));
    let none = gilab(&["attack"]);
    assert_eq!(none.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&none.stderr).contains("--config"));
}

#[test]
fn unknown_config_field_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &tmp.path().join("out"));
    let mut body = std::fs::read_to_string(&config).unwrap();
    body.push_str("\n[attack2]\nlr = 1.0\n");
    std::fs::write(&config, body).unwrap();
    let out = gilab(&["attack", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("attack2"));
}

#[test]
fn rerun_is_idempotent_and_override_breaks_the_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let outdir = tmp.path().join("out");
    let config = write_config(tmp.path(), &outdir);
    let cfg = config.to_str().unwrap();

    let first = gilab(&["collect", "--config", cfg]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));

    let again = gilab(&["collect", "--config", cfg]);
    assert!(again.status.success());
    assert!(String::from_utf8_lossy(&again.stdout).contains("up to date"));

    // train-denoiser consumes collect; an override changes the digest.
    let broken = gilab(&["train-denoiser", "--config", cfg, "--attack.lr", "0.2"]);
    assert_eq!(broken.status.code(), Some(3));
    let err = String::from_utf8_lossy(&broken.stderr);
    assert!(err.contains("digest mismatch"), "stderr: {err}");

    let chained = gilab(&["train-denoiser", "--config", cfg]);
    assert!(chained.status.success(), "{}", String::from_utf8_lossy(&chained.stderr));
}

#[test]
fn missing_upstream_stage_names_the_command_to_run() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &tmp.path().join("out"));
    let out = gilab(&["train-denoiser", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gilab collect"));
}

#[test]
fn held_lock_fails_without_touching_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let outdir = tmp.path().join("out");
    let config = write_config(tmp.path(), &outdir);
    std::fs::create_dir_all(&outdir).unwrap();
    std::fs::write(outdir.join(".gilab-lock"), "collect pid 99999").unwrap();
    let out = gilab(&["collect", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lock"));
    assert!(!outdir.join("collect").exists());
    assert!(!outdir.join("collect.partial").exists());
}

#[test]
fn foreign_stage_directory_is_quarantined_not_deleted() {
    let tmp = tempfile::tempdir().unwrap();
    let outdir = tmp.path().join("out");
    let config = write_config(tmp.path(), &outdir);
    let foreign = outdir.join("collect");
    std::fs::create_dir_all(&foreign).unwrap();
    std::fs::write(foreign.join("precious.txt"), "handwritten notes").unwrap();

    let out = gilab(&["collect", "--config", config.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(outdir.join("collect").join("run-manifest.json").exists());
    let quarantined: Vec<_> = std::fs::read_dir(outdir.join("quarantine"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(quarantined.len(), 1);
    assert!(quarantined[0].join("precious.txt").exists());
}

#[test]
fn overriding_a_table_is_rejected_with_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &tmp.path().join("out"));
    let out = gilab(&["collect", "--config", config.to_str().unwrap(), "--attack", "5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scalar"));
}
