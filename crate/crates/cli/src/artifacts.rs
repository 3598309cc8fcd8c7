//! On-disk layout shared by every command: per-output-dir locking, staged
//! command directories (written to `<command>.partial`, renamed into place
//! only after the run manifest lands), quarantine of leftover partial
//! output, pair shards, and checkpoint wrappers.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use gilab_core::checkpoint;
use gilab_core::data;
use gilab_core::guide::PairSet;
use gilab_core::nn::{LayerSpec, Model};
use gilab_core::tensor::Tensor;

use crate::CliError;

/// One command per output directory at a time. The lock file records who
/// holds it; dropping the guard releases it.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(output_dir: &Path, command: &str) -> Result<DirLock, CliError> {
        fs::create_dir_all(output_dir)
            .map_err(|e| CliError::Failure(format!("cannot create {}: {e}", output_dir.display())))?;
        let path = output_dir.join(".gilab-lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{command} pid {}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = fs::read_to_string(&path).unwrap_or_default();
                Err(CliError::Failure(format!(
                    "{} is locked by another gilab run ({}); remove {} if that run is gone",
                    output_dir.display(),
                    holder.trim(),
                    path.display()
                )))
            }
            Err(e) => Err(CliError::Failure(format!(
                "cannot create lock {}: {e}",
                path.display()
            ))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Written into every completed command directory; the digest is what the
/// chained-stage checks compare.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub seed: u64,
    pub threads: usize,
    pub versions: BTreeMap<String, String>,
    #[serde(default)]
    pub notes: Vec<String>,
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("gilab".into(), env!("CARGO_PKG_VERSION").into()),
        ("gilab-core".into(), gilab_core::VERSION.into()),
    ])
}

pub fn stage_path(output_dir: &Path, command: &str) -> PathBuf {
    output_dir.join(command)
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("run-manifest.json")
}

/// An in-progress command directory. Work lands in `dir` (the `.partial`
/// path); `commit` writes the manifest and renames it into place. If the
/// process dies first, the partial directory stays behind and the next run
/// moves it into `quarantine/`.
pub struct Stage {
    pub dir: PathBuf,
    final_dir: PathBuf,
}

impl Stage {
    /// `Ok(None)` means the command already completed under this exact
    /// config digest and there is nothing to do.
    pub fn begin(output_dir: &Path, command: &str, digest: &str) -> Result<Option<Stage>, CliError> {
        let final_dir = stage_path(output_dir, command);
        if final_dir.exists() {
            let mp = manifest_path(&final_dir);
            if mp.exists() {
                let manifest: RunManifest = read_json(&mp)?;
                if manifest.config_digest == digest {
                    return Ok(None);
                }
                return Err(CliError::Digest(format!(
                    "{} holds outputs for config {}, but the current config is {}; \
                     remove that directory or restore the original config",
                    final_dir.display(),
                    short(&manifest.config_digest),
                    short(digest)
                )));
            }
            // a directory without a manifest never completed
            quarantine(output_dir, command, &final_dir)?;
        }
        let partial = output_dir.join(format!("{command}.partial"));
        if partial.exists() {
            quarantine(output_dir, command, &partial)?;
        }
        fs::create_dir_all(&partial)
            .map_err(|e| CliError::Failure(format!("cannot create {}: {e}", partial.display())))?;
        Ok(Some(Stage {
            dir: partial,
            final_dir,
        }))
    }

    pub fn commit(self, manifest: &RunManifest) -> Result<PathBuf, CliError> {
        write_json(&manifest_path(&self.dir), manifest)?;
        fs::rename(&self.dir, &self.final_dir).map_err(|e| {
            CliError::Failure(format!(
                "cannot move {} into place: {e}",
                self.dir.display()
            ))
        })?;
        Ok(self.final_dir)
    }
}

fn quarantine(output_dir: &Path, command: &str, dir: &Path) -> Result<(), CliError> {
    let root = output_dir.join("quarantine");
    fs::create_dir_all(&root)
        .map_err(|e| CliError::Failure(format!("cannot create {}: {e}", root.display())))?;
    for k in 0.. {
        let dest = root.join(format!("{command}-{k:03}"));
        if dest.exists() {
            continue;
        }
        fs::rename(dir, &dest)
            .map_err(|e| CliError::Failure(format!("cannot quarantine {}: {e}", dir.display())))?;
        eprintln!(
            "warning: moved incomplete output {} to {}",
            dir.display(),
            dest.display()
        );
        return Ok(());
    }
    unreachable!()
}

/// Completed upstream stage, digest-checked. Missing stage is a config
/// error ("run X first"); a digest mismatch is the chained-stage refusal.
pub fn require_stage(output_dir: &Path, command: &str, digest: &str) -> Result<PathBuf, CliError> {
    let dir = stage_path(output_dir, command);
    let mp = manifest_path(&dir);
    if !mp.exists() {
        return Err(CliError::Config(format!(
            "stage {command:?} has not run in {}; run `gilab {command}` first",
            output_dir.display()
        )));
    }
    let manifest: RunManifest = read_json(&mp)?;
    if manifest.config_digest != digest {
        return Err(CliError::Digest(format!(
            "stage {command:?} in {} was produced by config {}, but the current config is {}; \
             rerun `gilab {command}` or restore the config that produced it",
            output_dir.display(),
            short(&manifest.config_digest),
            short(digest)
        )));
    }
    Ok(dir)
}

pub fn short(digest: &str) -> &str {
    &digest[..12.min(digest.len())]
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Failure(format!("serialize {}: {e}", path.display())))?;
    fs::write(path, text.as_bytes())
        .map_err(|e| CliError::Failure(format!("write {}: {e}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Failure(format!("read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Failure(format!("parse {}: {e}", path.display())))
}

/// Sidecar for one (clean, noisy) record in a pair directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShardSidecar {
    pub stage: usize,
    pub batch_size_of_origin: usize,
    /// Surrogate unit index the pair came from.
    pub unit: usize,
    pub attack_digest: String,
    pub defense_digest: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShardManifest {
    pub scale: usize,
    pub total: usize,
    pub stage_totals: BTreeMap<String, usize>,
    pub records: Vec<String>,
}

/// Writes a pair set as `<base>.clean.png` + `<base>.noisy.png` + JSON
/// sidecar per record, plus a manifest listing them all.
pub fn write_pair_shards(
    dir: &Path,
    pairs: &PairSet,
    batch_size: usize,
    attack_digest: &str,
    defense_digest: &str,
) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Failure(format!("cannot create {}: {e}", dir.display())))?;
    let latent: Vec<usize> = pairs.noisy.shape()[1..].to_vec();
    let full: Vec<usize> = pairs.clean.shape()[1..].to_vec();
    let mut records = Vec::with_capacity(pairs.len());
    let mut stage_totals: BTreeMap<String, usize> = BTreeMap::new();
    for i in 0..pairs.len() {
        let base = format!("pair-{i:05}");
        let noisy = pairs.noisy.row(i)?.reshape(&latent)?;
        let clean = pairs.clean.row(i)?.reshape(&full)?;
        data::save_png(&dir.join(format!("{base}.noisy.png")), &noisy)?;
        data::save_png(&dir.join(format!("{base}.clean.png")), &clean)?;
        write_json(
            &dir.join(format!("{base}.json")),
            &ShardSidecar {
                stage: pairs.stages[i],
                batch_size_of_origin: batch_size,
                unit: pairs.origin[i],
                attack_digest: attack_digest.to_string(),
                defense_digest: defense_digest.to_string(),
            },
        )?;
        *stage_totals.entry(pairs.stages[i].to_string()).or_insert(0) += 1;
        records.push(base);
    }
    write_json(
        &dir.join("manifest.json"),
        &ShardManifest {
            scale: pairs.scale,
            total: pairs.len(),
            stage_totals,
            records,
        },
    )
}

pub fn read_pair_shards(dir: &Path) -> Result<(PairSet, Vec<ShardSidecar>), CliError> {
    let manifest: ShardManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.records.is_empty() {
        return Err(CliError::Config(format!(
            "{} lists no pair records",
            dir.display()
        )));
    }
    let mut noisy = Vec::with_capacity(manifest.records.len());
    let mut clean = Vec::with_capacity(manifest.records.len());
    let mut stages = Vec::with_capacity(manifest.records.len());
    let mut origins = Vec::with_capacity(manifest.records.len());
    let mut sidecars = Vec::with_capacity(manifest.records.len());
    for base in &manifest.records {
        noisy.push(data::load_png(&dir.join(format!("{base}.noisy.png")))?);
        clean.push(data::load_png(&dir.join(format!("{base}.clean.png")))?);
        let sc: ShardSidecar = read_json(&dir.join(format!("{base}.json")))?;
        stages.push(sc.stage);
        origins.push(sc.unit);
        sidecars.push(sc);
    }
    let pairs = PairSet::new(
        Tensor::stack(&noisy)?,
        Tensor::stack(&clean)?,
        stages,
        origins,
        manifest.scale,
    )?;
    Ok((pairs, sidecars))
}

#[derive(Serialize, Deserialize)]
struct DenoiserHeader {
    kind: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    scale: usize,
    attack_digest: String,
    defense_digest: String,
}

/// A trained denoiser plus the provenance digests of the pairs it was
/// trained on.
pub struct DenoiserCheckpoint {
    pub model: Model,
    pub scale: usize,
    pub attack_digest: String,
    pub defense_digest: String,
}

pub fn save_denoiser(path: &Path, ck: &DenoiserCheckpoint) -> Result<(), CliError> {
    let header = serde_json::to_value(DenoiserHeader {
        kind: "denoiser".into(),
        input_shape: ck.model.input_shape.clone(),
        layers: ck.model.layers.clone(),
        scale: ck.scale,
        attack_digest: ck.attack_digest.clone(),
        defense_digest: ck.defense_digest.clone(),
    })
    .map_err(|e| CliError::Failure(format!("denoiser header: {e}")))?;
    checkpoint::save_tensors(path, &header, &ck.model.params).map_err(CliError::from)
}

pub fn load_denoiser(path: &Path) -> Result<DenoiserCheckpoint, CliError> {
    let (header, tensors) = checkpoint::load_tensors(path)?;
    let header: DenoiserHeader = serde_json::from_value(header).map_err(|e| {
        CliError::Config(format!("{} is not a denoiser checkpoint: {e}", path.display()))
    })?;
    if header.kind != "denoiser" {
        return Err(CliError::Config(format!(
            "{}: checkpoint kind {:?} is not \"denoiser\"",
            path.display(),
            header.kind
        )));
    }
    let model = Model::with_params(header.input_shape, header.layers, tensors)?;
    Ok(DenoiserCheckpoint {
        model,
        scale: header.scale,
        attack_digest: header.attack_digest,
        defense_digest: header.defense_digest,
    })
}

/// Header stored with each reconstructed batch; `start`/`len` locate the
/// true rows inside the victim dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconHeader {
    pub kind: String,
    pub batch: usize,
    pub start: usize,
    pub len: usize,
    pub labels: Vec<usize>,
    pub last_loss: f64,
    pub last_grad_loss: f64,
    pub best_grad_loss: f64,
}

pub fn save_recon(path: &Path, header: &ReconHeader, x_hat: &Tensor) -> Result<(), CliError> {
    let value = serde_json::to_value(header)
        .map_err(|e| CliError::Failure(format!("recon header: {e}")))?;
    let tensors = BTreeMap::from([("x_hat".to_string(), x_hat.clone())]);
    checkpoint::save_tensors(path, &value, &tensors).map_err(CliError::from)
}

pub fn load_recon(path: &Path) -> Result<(ReconHeader, Tensor), CliError> {
    let (header, mut tensors) = checkpoint::load_tensors(path)?;
    let header: ReconHeader = serde_json::from_value(header).map_err(|e| {
        CliError::Failure(format!("{} is not a reconstruction: {e}", path.display()))
    })?;
    if header.kind != "recon" {
        return Err(CliError::Failure(format!(
            "{}: checkpoint kind {:?} is not \"recon\"",
            path.display(),
            header.kind
        )));
    }
    let x_hat = tensors.remove("x_hat").ok_or_else(|| {
        CliError::Failure(format!("{} is missing the x_hat tensor", path.display()))
    })?;
    Ok((header, x_hat))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released_on_drop() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path(), "attack").unwrap();
        assert!(DirLock::acquire(dir.path(), "report").is_err());
        drop(lock);
        DirLock::acquire(dir.path(), "report").unwrap();
    }

    #[test]
    fn stage_skips_when_digest_matches_and_refuses_when_not() {
        let dir = tempfile::tempdir().unwrap();
        let stage = Stage::begin(dir.path(), "collect", "abc").unwrap().unwrap();
        std::fs::write(stage.dir.join("data.txt"), "x").unwrap();
        let manifest = RunManifest {
            command: "collect".into(),
            config_digest: "abc".into(),
            seed: 0,
            threads: 1,
            versions: versions(),
            notes: vec![],
        };
        let final_dir = stage.commit(&manifest).unwrap();
        assert!(final_dir.join("data.txt").exists());
        assert!(final_dir.join("run-manifest.json").exists());

        assert!(Stage::begin(dir.path(), "collect", "abc").unwrap().is_none());
        match Stage::begin(dir.path(), "collect", "other") {
            Err(CliError::Digest(_)) => {}
            Err(other) => panic!("expected digest refusal, got {other:?}"),
            Ok(_) => panic!("expected digest refusal, got a stage"),
        }
    }

    #[test]
    fn leftover_partial_dirs_are_quarantined() {
        let dir = tempfile::tempdir().unwrap();
        let stale = dir.path().join("attack.partial");
        std::fs::create_dir_all(&stale).unwrap();
        std::fs::write(stale.join("halfdone"), "x").unwrap();
        let stage = Stage::begin(dir.path(), "attack", "abc").unwrap().unwrap();
        assert!(stage.dir.exists());
        let q = dir.path().join("quarantine/attack-000");
        assert!(q.join("halfdone").exists());
        assert!(!q.join("run-manifest.json").exists());
    }

    #[test]
    fn require_stage_distinguishes_missing_from_mismatched() {
        let dir = tempfile::tempdir().unwrap();
        match require_stage(dir.path(), "collect", "abc") {
            Err(CliError::Config(m)) => assert!(m.contains("gilab collect"), "{m}"),
            other => panic!("expected config error, got {other:?}"),
        }
        let stage = Stage::begin(dir.path(), "collect", "abc").unwrap().unwrap();
        stage
            .commit(&RunManifest {
                command: "collect".into(),
                config_digest: "abc".into(),
                seed: 0,
                threads: 1,
                versions: versions(),
                notes: vec![],
            })
            .unwrap();
        require_stage(dir.path(), "collect", "abc").unwrap();
        assert!(matches!(
            require_stage(dir.path(), "collect", "xyz"),
            Err(CliError::Digest(_))
        ));
    }
}
