//! The six experiment commands. Each one stages its outputs under
//! `output_dir/<command>.partial`, then commits them with a run manifest
//! carrying the config digest; downstream commands refuse digests that do
//! not match their own config.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use serde::Serialize;

use gilab_core::attack::{self, AttackHooks, LabelMode};
use gilab_core::checkpoint;
use gilab_core::data;
use gilab_core::fed::{self, Algorithm};
use gilab_core::guide::{self, BlendedDenoiser, CollectConfig};
use gilab_core::metrics::{self, MetricAggregates, Summary};
use gilab_core::nn::Model;
use gilab_core::par::Threads;
use gilab_core::rng;
use gilab_core::tensor::Tensor;
use gilab_core::train::{self, FitTarget};

use crate::artifacts::{
    self, DenoiserCheckpoint, ReconHeader, RunManifest, Stage,
};
use crate::config::Experiment;
use crate::dataset::{self, Loaded};
use crate::CliError;

pub struct Ctx {
    pub exp: Experiment,
    pub digest: String,
    pub threads: Threads,
    pub thread_count: usize,
}

impl Ctx {
    fn manifest(&self, command: &str, notes: Vec<String>) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            config_digest: self.digest.clone(),
            seed: self.exp.seed,
            threads: self.thread_count,
            versions: artifacts::versions(),
            notes,
        }
    }

    fn begin(&self, command: &str) -> Result<Option<Stage>, CliError> {
        let stage = Stage::begin(&self.exp.output_dir, command, &self.digest)?;
        if stage.is_none() {
            println!(
                "{command}: up to date (config {})",
                artifacts::short(&self.digest)
            );
        } else if let Some(s) = &stage {
            artifacts::write_json(&s.dir.join("effective-config.json"), &self.exp)?;
        }
        Ok(stage)
    }
}

fn load_both(ctx: &Ctx) -> Result<(Loaded, Loaded), CliError> {
    let victim = dataset::load_source(&ctx.exp.victim, &ctx.threads)?;
    let surrogate = dataset::load_source(&ctx.exp.surrogate, &ctx.threads)?;
    dataset::check_disjoint(&victim.manifest, &surrogate.manifest)?;
    Ok((victim, surrogate))
}

fn build_model(exp: &Experiment) -> Result<Model, CliError> {
    Model::new(exp.model.input.clone(), exp.model.layers.clone(), exp.model.seed)
        .map_err(|e| CliError::Config(format!("model: {e}")))
}

fn check_image_shape(exp: &Experiment, loaded: &Loaded, which: &str) -> Result<(), CliError> {
    if loaded.manifest.shape != exp.model.input {
        return Err(CliError::Config(format!(
            "{which} images are {:?} but model.input is {:?}",
            loaded.manifest.shape, exp.model.input
        )));
    }
    Ok(())
}

pub fn train_probe(ctx: &Ctx) -> Result<(), CliError> {
    let exp = &ctx.exp;
    let Some(probe) = &exp.probe else {
        return Err(CliError::Config(
            "train-probe needs a [probe] section (layers + fit settings)".into(),
        ));
    };
    let (_victim, surrogate) = load_both(ctx)?;
    let Some(stage) = ctx.begin("train-probe")? else {
        return Ok(());
    };

    let dims = surrogate.manifest.shape.clone();
    let model = Model::new(dims, probe.layers.clone(), probe.seed)
        .map_err(|e| CliError::Config(format!("probe: {e}")))?;
    let (trained, fit_report) = train::fit(
        &model,
        &surrogate.data.images,
        &FitTarget::Labels(&surrogate.data.labels),
        &probe.fit,
        &ctx.threads,
        |e| println!("epoch {:>3}  mean loss {:.6}", e.epoch, e.mean_loss),
    )?;

    let logits = trained.forward(&surrogate.data.images)?;
    let accuracy = train_accuracy(&logits, &surrogate.data.labels);

    checkpoint::save_model(&stage.dir.join("probe.gilb"), &trained)?;
    #[derive(Serialize)]
    struct ProbeReport {
        fit: train::FitReport,
        train_accuracy: f64,
    }
    artifacts::write_json(
        &stage.dir.join("probe-report.json"),
        &ProbeReport {
            fit: fit_report,
            train_accuracy: accuracy,
        },
    )?;
    artifacts::write_json(&stage.dir.join("dataset-surrogate.json"), &surrogate.manifest)?;
    let dir = stage.commit(&ctx.manifest("train-probe", vec![]))?;
    println!(
        "train-probe: accuracy {accuracy:.3} on {} images -> {}",
        surrogate.data.labels.len(),
        dir.display()
    );
    Ok(())
}

fn train_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let n = labels.len();
    if n == 0 {
        return 0.0;
    }
    let k = logits.numel() / n;
    let data = logits.data();
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &label)| {
            let row = &data[i * k..(i + 1) * k];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(j, _)| j)
                .unwrap_or(0);
            argmax == label
        })
        .count();
    hits as f64 / n as f64
}

pub fn collect(ctx: &Ctx) -> Result<(), CliError> {
    let exp = &ctx.exp;
    if exp.guide.snapshot_iters.is_empty() {
        return Err(CliError::Config(
            "collect needs guide.snapshot_iters (the attack iterations to harvest)".into(),
        ));
    }
    if exp.guide.pairs == 0 {
        return Err(CliError::Config("collect needs guide.pairs > 0".into()));
    }
    let (_victim, surrogate) = load_both(ctx)?;
    check_image_shape(exp, &surrogate, "surrogate")?;

    let b = exp.client.batch_size;
    let per_unit = b * exp.guide.snapshot_iters.len();
    let units_needed = exp.guide.pairs.div_ceil(per_unit);
    let available = surrogate.data.labels.len() / b;
    if units_needed > available {
        return Err(CliError::Config(format!(
            "surrogate dataset supports {available} disjoint units of {b}, but {} pairs at {} \
             snapshot(s) per image need {units_needed}",
            exp.guide.pairs,
            exp.guide.snapshot_iters.len()
        )));
    }

    let Some(stage) = ctx.begin("collect")? else {
        return Ok(());
    };
    let model = build_model(exp)?;
    let units = guide::carve_units(&surrogate.data, b, units_needed)?;
    let cc = CollectConfig {
        snapshot_iters: exp.guide.snapshot_iters.clone(),
        pairs: exp.guide.pairs,
        scale: exp.guide.scale,
        seed: exp.guide.seed,
    };
    let pairs = guide::collect_pairs(
        &model,
        &units,
        &exp.client,
        exp.defense.as_ref(),
        &exp.attack,
        &cc,
        &ctx.threads,
    )?;
    artifacts::write_pair_shards(
        &stage.dir.join("pairs"),
        &pairs,
        b,
        &exp.attack_digest(),
        &exp.defense_digest(),
    )?;
    artifacts::write_json(&stage.dir.join("dataset-surrogate.json"), &surrogate.manifest)?;
    let total = pairs.len();
    let dir = stage.commit(&ctx.manifest("collect", vec![]))?;
    println!("collect: {total} pairs from {units_needed} surrogate units -> {}", dir.display());
    Ok(())
}

pub fn train_denoiser(ctx: &Ctx) -> Result<(), CliError> {
    let exp = &ctx.exp;
    let collect_dir = artifacts::require_stage(&exp.output_dir, "collect", &ctx.digest)?;
    let (pairs, sidecars) = artifacts::read_pair_shards(&collect_dir.join("pairs"))?;

    let mut notes = Vec::new();
    let attack_digests: BTreeSet<&str> =
        sidecars.iter().map(|s| s.attack_digest.as_str()).collect();
    let defense_digests: BTreeSet<&str> =
        sidecars.iter().map(|s| s.defense_digest.as_str()).collect();
    for (what, set) in [("attack", &attack_digests), ("defense", &defense_digests)] {
        if set.len() > 1 {
            let line = format!("pair shards mix {} {what} digests", set.len());
            eprintln!("warning: {line}");
            notes.push(line);
        }
    }

    let Some(stage) = ctx.begin("train-denoiser")? else {
        return Ok(());
    };
    let (model, report) = guide::train_denoiser(&pairs, &exp.denoiser, &ctx.threads)?;
    artifacts::save_denoiser(
        &stage.dir.join("denoiser.gilb"),
        &DenoiserCheckpoint {
            model,
            scale: pairs.scale,
            attack_digest: sidecars[0].attack_digest.clone(),
            defense_digest: sidecars[0].defense_digest.clone(),
        },
    )?;
    artifacts::write_json(&stage.dir.join("denoiser-report.json"), &report)?;
    let dir = stage.commit(&ctx.manifest("train-denoiser", notes))?;
    println!(
        "train-denoiser: {} train / {} held-out pairs, held-out psnr {:.2} -> {:.2} dB -> {}",
        report.train_pairs,
        report.held_out_pairs,
        report.psnr_before,
        report.psnr_after,
        dir.display()
    );
    Ok(())
}

enum Arm {
    Plain,
    Guided,
}

pub fn attack(ctx: &Ctx) -> Result<(), CliError> {
    run_arm(ctx, Arm::Plain)
}

pub fn guide(ctx: &Ctx) -> Result<(), CliError> {
    run_arm(ctx, Arm::Guided)
}

fn load_blend(ctx: &Ctx) -> Result<(BlendedDenoiser, Vec<String>), CliError> {
    let exp = &ctx.exp;
    let mut notes = Vec::new();
    let specs: Vec<(PathBuf, f64)> = if exp.guide.blend.is_empty() {
        let dir = artifacts::require_stage(&exp.output_dir, "train-denoiser", &ctx.digest)?;
        vec![(dir.join("denoiser.gilb"), 1.0)]
    } else {
        exp.guide
            .blend
            .iter()
            .map(|b| (PathBuf::from(&b.checkpoint), b.weight))
            .collect()
    };

    let current_attack = exp.attack_digest();
    let current_defense = exp.defense_digest();
    let mut models = Vec::with_capacity(specs.len());
    let mut weights = Vec::with_capacity(specs.len());
    for (path, weight) in specs {
        let ck = artifacts::load_denoiser(&path)?;
        // trained-under-different-conditions is a warning, not an error:
        // cross-condition reuse is a legitimate experiment
        if ck.defense_digest != current_defense {
            let line = format!(
                "denoiser {} was trained under defense digest {}, this run uses {}",
                path.display(),
                artifacts::short(&ck.defense_digest),
                artifacts::short(&current_defense)
            );
            eprintln!("warning: {line}");
            notes.push(line);
        }
        if ck.attack_digest != current_attack {
            let line = format!(
                "denoiser {} was trained on attacks with digest {}, this run uses {}",
                path.display(),
                artifacts::short(&ck.attack_digest),
                artifacts::short(&current_attack)
            );
            eprintln!("warning: {line}");
            notes.push(line);
        }
        models.push(ck.model);
        weights.push(weight);
    }
    let blend = BlendedDenoiser::new(models, weights)
        .map_err(|e| CliError::Config(format!("guide.blend: {e}")))?;
    Ok((blend, notes))
}

struct BatchOut {
    batch: usize,
    start: usize,
    labels: Vec<usize>,
    x_hat: Tensor,
    snapshots: Vec<(usize, Tensor)>,
    progress: Vec<String>,
    last_loss: f64,
    last_grad_loss: f64,
    best_grad_loss: f64,
}

#[derive(Serialize)]
struct BatchSummary {
    batch: usize,
    start: usize,
    len: usize,
    last_loss: f64,
    last_grad_loss: f64,
    best_grad_loss: f64,
}

fn run_arm(ctx: &Ctx, arm: Arm) -> Result<(), CliError> {
    let exp = &ctx.exp;
    let command = match arm {
        Arm::Plain => "attack",
        Arm::Guided => "guide",
    };
    let (victim, _surrogate) = load_both(ctx)?;
    check_image_shape(exp, &victim, "victim")?;

    let b = exp.client.batch_size;
    let need = exp.victim_batches * b;
    let have = victim.data.labels.len();
    if need > have {
        return Err(CliError::Config(format!(
            "victim dataset has {have} images but {} batches of {b} need {need}",
            exp.victim_batches
        )));
    }

    let (blend, notes) = match arm {
        Arm::Plain => (None, vec![]),
        Arm::Guided => {
            if exp.guide.denoise_iters.is_empty() {
                return Err(CliError::Config(
                    "guide needs guide.denoise_iters (iterations at which to denoise)".into(),
                ));
            }
            let (blend, notes) = load_blend(ctx)?;
            (Some(blend), notes)
        }
    };
    let d_iters = exp.guide.denoise_iters.clone();

    let Some(stage) = ctx.begin(command)? else {
        return Ok(());
    };
    let model = build_model(exp)?;

    let outs: Vec<BatchOut> = ctx
        .threads
        .try_map(exp.victim_batches, |bi| {
            let (images, labels) = victim.data.slice(bi * b, b)?;
            let mut update = match exp.client.algorithm {
                Algorithm::FedSgd => fed::fedsgd_update(&model, &images, &labels, &exp.client)?,
                Algorithm::FedAvg => fed::fedavg_update(&model, &images, &labels, &exp.client)?,
            };
            if let Some(defense) = &exp.defense {
                update = fed::apply_defense(&update, defense, bi as u64)?;
            }
            let mut cfg = exp.attack.clone();
            cfg.seed = rng::derive(exp.attack.seed, bi as u64);
            let known = matches!(cfg.label_mode, LabelMode::Known).then_some(labels.as_slice());

            let mut snapshots: Vec<(usize, Tensor)> = Vec::new();
            let mut progress: Vec<String> = Vec::new();
            let state;
            {
                let total = cfg.iterations;
                let every = exp.progress_every;
                let mut hooks = AttackHooks {
                    on_snapshot: Some(Box::new(|t, x: &Tensor| snapshots.push((t, x.clone())))),
                    on_progress: Some(Box::new(|t, st: &attack::ReconstructionState| {
                        if every == 0 || (t % every != 0 && t != total) {
                            return;
                        }
                        let mut line = serde_json::json!({
                            "batch": bi,
                            "iteration": t,
                            "loss": st.last_loss,
                            "grad_loss": st.last_grad_loss,
                        });
                        if st.x_hat.shape() == images.shape() {
                            if let Ok(p) = metrics::psnr(&st.x_hat, &images) {
                                line["psnr"] = p.into();
                            }
                        }
                        progress.push(line.to_string());
                    })),
                };
                state = match &blend {
                    None => attack::run_attack(&model, &update, &cfg, known, &mut hooks)?,
                    Some(blend) => guide::guide_reconstruct(
                        &model, &update, &cfg, blend, &d_iters, known, &mut hooks,
                    )?,
                };
            }
            Ok::<BatchOut, gilab_core::error::Error>(BatchOut {
                batch: bi,
                start: bi * b,
                labels,
                x_hat: state.x_hat.clone(),
                snapshots,
                progress,
                last_loss: state.last_loss,
                last_grad_loss: state.last_grad_loss,
                best_grad_loss: state.best_grad_loss,
            })
        })
        .map_err(CliError::from)?;

    let recon_dir = stage.dir.join("recon");
    let image_dir = stage.dir.join("images");
    fs::create_dir_all(&recon_dir)
        .and_then(|_| fs::create_dir_all(&image_dir))
        .map_err(|e| CliError::Failure(format!("create output dirs: {e}")))?;
    let snap_dir = stage.dir.join("snapshots");
    if outs.iter().any(|o| !o.snapshots.is_empty()) {
        fs::create_dir_all(&snap_dir)
            .map_err(|e| CliError::Failure(format!("create {}: {e}", snap_dir.display())))?;
    }

    let cols = b.min(8);
    let mut jsonl = String::new();
    let mut summaries = Vec::with_capacity(outs.len());
    for out in &outs {
        artifacts::save_recon(
            &recon_dir.join(format!("batch-{:03}.gilb", out.batch)),
            &ReconHeader {
                kind: "recon".into(),
                batch: out.batch,
                start: out.start,
                len: b,
                labels: out.labels.clone(),
                last_loss: out.last_loss,
                last_grad_loss: out.last_grad_loss,
                best_grad_loss: out.best_grad_loss,
            },
            &out.x_hat,
        )?;
        data::save_png_grid(
            &image_dir.join(format!("batch-{:03}.png", out.batch)),
            &out.x_hat,
            cols,
        )?;
        for (t, x) in &out.snapshots {
            data::save_png_grid(
                &snap_dir.join(format!("batch-{:03}-t{t:05}.png", out.batch)),
                x,
                cols,
            )?;
        }
        for line in &out.progress {
            jsonl.push_str(line);
            jsonl.push('\n');
        }
        summaries.push(BatchSummary {
            batch: out.batch,
            start: out.start,
            len: b,
            last_loss: out.last_loss,
            last_grad_loss: out.last_grad_loss,
            best_grad_loss: out.best_grad_loss,
        });
        println!(
            "batch {:03}  grad loss {:.3e}  best {:.3e}",
            out.batch, out.last_grad_loss, out.best_grad_loss
        );
    }
    if !jsonl.is_empty() {
        fs::write(stage.dir.join("progress.jsonl"), jsonl)
            .map_err(|e| CliError::Failure(format!("write progress.jsonl: {e}")))?;
    }
    artifacts::write_json(&stage.dir.join("summary.json"), &summaries)?;
    artifacts::write_json(&stage.dir.join("dataset-victim.json"), &victim.manifest)?;
    let count = outs.len();
    let dir = stage.commit(&ctx.manifest(command, notes))?;
    println!("{command}: {count} batches -> {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct ArmReport {
    batches: usize,
    pairs: usize,
    aggregates: MetricAggregates,
    per_batch_psnr: Vec<f64>,
    per_batch_proxy: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct PairedTest {
    batches: usize,
    wins: usize,
    losses: usize,
    ties: usize,
    p_value: f64,
}

#[derive(Serialize)]
struct FullReport {
    config_digest: String,
    attack_digest: String,
    defense_digest: String,
    arms: BTreeMap<String, ArmReport>,
    /// guide vs attack on per-batch mean PSNR; a win is guide strictly higher.
    paired_psnr: Option<PairedTest>,
    /// guide vs attack on per-batch mean proxy distance; a win is guide
    /// strictly lower.
    paired_proxy: Option<PairedTest>,
}

struct ArmData {
    mse: Vec<f64>,
    psnr: Vec<f64>,
    ssim: Vec<f64>,
    proxy: Vec<f64>,
    batch_psnr: BTreeMap<usize, f64>,
    batch_proxy: BTreeMap<usize, f64>,
    batches: usize,
}

pub fn report(ctx: &Ctx) -> Result<(), CliError> {
    let exp = &ctx.exp;
    let (victim, _surrogate) = load_both(ctx)?;
    let probe = load_probe(ctx, &victim)?;

    let mut present: Vec<(&str, PathBuf)> = Vec::new();
    for name in ["attack", "guide"] {
        if artifacts::stage_path(&exp.output_dir, name).exists() {
            present.push((name, artifacts::require_stage(&exp.output_dir, name, &ctx.digest)?));
        }
    }
    if present.is_empty() {
        return Err(CliError::Config(
            "nothing to report: run `gilab attack` and/or `gilab guide` first".into(),
        ));
    }

    let Some(stage) = ctx.begin("report")? else {
        return Ok(());
    };

    let mut csv = String::from("arm,batch,reconstruction,matched_truth,mse,psnr,ssim,proxy\n");
    let mut arms: BTreeMap<String, ArmReport> = BTreeMap::new();
    let mut data: BTreeMap<&str, ArmData> = BTreeMap::new();

    for (name, dir) in &present {
        let recon_dir = dir.join("recon");
        let mut files: Vec<PathBuf> = fs::read_dir(&recon_dir)
            .map_err(|e| CliError::Failure(format!("read {}: {e}", recon_dir.display())))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "gilb"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(CliError::Failure(format!(
                "{} holds no reconstructions",
                recon_dir.display()
            )));
        }

        let mut arm = ArmData {
            mse: vec![],
            psnr: vec![],
            ssim: vec![],
            proxy: vec![],
            batch_psnr: BTreeMap::new(),
            batch_proxy: BTreeMap::new(),
            batches: files.len(),
        };
        for file in &files {
            let (header, x_hat) = artifacts::load_recon(file)?;
            let (truth, _labels) = victim.data.slice(header.start, header.len)?;
            let rep = metrics::match_reconstructions(&x_hat, &truth, probe.as_ref())?;
            for p in &rep.pairs {
                let proxy = p.proxy.map(|v| v.to_string()).unwrap_or_default();
                let _ = writeln!(
                    csv,
                    "{name},{},{},{},{},{},{},{proxy}",
                    header.batch, p.reconstruction, p.matched_truth, p.mse, p.psnr, p.ssim
                );
                arm.mse.push(p.mse);
                arm.psnr.push(p.psnr);
                arm.ssim.push(p.ssim);
                if let Some(v) = p.proxy {
                    arm.proxy.push(v);
                }
            }
            let n = rep.pairs.len() as f64;
            arm.batch_psnr.insert(
                header.batch,
                rep.pairs.iter().map(|p| p.psnr).sum::<f64>() / n,
            );
            if rep.pairs.iter().all(|p| p.proxy.is_some()) {
                arm.batch_proxy.insert(
                    header.batch,
                    rep.pairs.iter().filter_map(|p| p.proxy).sum::<f64>() / n,
                );
            }
        }
        arms.insert(
            name.to_string(),
            ArmReport {
                batches: arm.batches,
                pairs: arm.psnr.len(),
                aggregates: MetricAggregates {
                    mse: Summary::of(&arm.mse),
                    psnr: Summary::of(&arm.psnr),
                    ssim: Summary::of(&arm.ssim),
                    proxy: (!arm.proxy.is_empty()).then(|| Summary::of(&arm.proxy)),
                },
                per_batch_psnr: arm.batch_psnr.values().copied().collect(),
                per_batch_proxy: (!arm.batch_proxy.is_empty())
                    .then(|| arm.batch_proxy.values().copied().collect()),
            },
        );
        data.insert(name, arm);
    }

    let paired_psnr = paired_test(&data, |a| &a.batch_psnr, true);
    let paired_proxy = paired_test(&data, |a| &a.batch_proxy, false);

    let full = FullReport {
        config_digest: ctx.digest.clone(),
        attack_digest: exp.attack_digest(),
        defense_digest: exp.defense_digest(),
        arms,
        paired_psnr,
        paired_proxy,
    };
    fs::write(stage.dir.join("metrics.csv"), &csv)
        .map_err(|e| CliError::Failure(format!("write metrics.csv: {e}")))?;
    artifacts::write_json(&stage.dir.join("report.json"), &full)?;
    artifacts::write_json(&stage.dir.join("dataset-victim.json"), &victim.manifest)?;
    let dir = stage.commit(&ctx.manifest("report", vec![]))?;

    for (name, arm) in &full.arms {
        let proxy = arm
            .aggregates
            .proxy
            .as_ref()
            .map(|s| format!("  proxy {:.4}±{:.4}", s.mean, s.std))
            .unwrap_or_default();
        println!(
            "{name}: psnr {:.2}±{:.2} dB  ssim {:.4}±{:.4}{proxy}  ({} pairs)",
            arm.aggregates.psnr.mean,
            arm.aggregates.psnr.std,
            arm.aggregates.ssim.mean,
            arm.aggregates.ssim.std,
            arm.pairs
        );
    }
    if let Some(p) = &full.paired_psnr {
        println!(
            "paired psnr (guide vs attack): {} wins / {} losses / {} ties, p = {:.5}",
            p.wins, p.losses, p.ties, p.p_value
        );
    }
    println!("report -> {}", dir.display());
    Ok(())
}

/// One-sided sign test of guide against attack over per-batch means.
/// `higher_wins` selects the direction that counts as a guide win.
fn paired_test(
    data: &BTreeMap<&str, ArmData>,
    field: impl Fn(&ArmData) -> &BTreeMap<usize, f64>,
    higher_wins: bool,
) -> Option<PairedTest> {
    let plain = field(data.get("attack")?);
    let guided = field(data.get("guide")?);
    let mut wins = 0;
    let mut losses = 0;
    let mut ties = 0;
    let mut n = 0;
    for (batch, g) in guided {
        let Some(a) = plain.get(batch) else { continue };
        n += 1;
        let better = if higher_wins { g > a } else { g < a };
        let worse = if higher_wins { g < a } else { g > a };
        if better {
            wins += 1;
        } else if worse {
            losses += 1;
        } else {
            ties += 1;
        }
    }
    if n == 0 {
        return None;
    }
    Some(PairedTest {
        batches: n,
        wins,
        losses,
        ties,
        p_value: metrics::sign_test_p(wins, losses),
    })
}

fn load_probe(ctx: &Ctx, victim: &Loaded) -> Result<Option<Model>, CliError> {
    let exp = &ctx.exp;
    if !exp.metrics.use_probe {
        return Ok(None);
    }
    let path = match &exp.metrics.probe_checkpoint {
        Some(p) => PathBuf::from(p),
        None => artifacts::require_stage(&exp.output_dir, "train-probe", &ctx.digest)?
            .join("probe.gilb"),
    };
    let model = checkpoint::load_model(&path).map_err(|e| {
        CliError::Config(format!(
            "{e}; run `gilab train-probe` or point metrics.probe_checkpoint at a classifier"
        ))
    })?;
    if model.input_shape != victim.manifest.shape {
        return Err(CliError::Config(format!(
            "probe expects {:?} inputs but victim images are {:?}",
            model.input_shape, victim.manifest.shape
        )));
    }
    Ok(Some(model))
}
