//! Experiment configuration: the TOML schema, command-line overrides, seed
//! resolution, and the canonical digest that ties every artifact on disk to
//! the configuration that produced it.
//!
//! The file holds one experiment. Omitted seeds are derived from the master
//! `seed` (one fixed stream per role), so `--seed` alone reseeds the whole
//! pipeline while explicit per-section seeds stay pinned.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gilab_core::attack::{AttackConfig, GradLoss, InitKind, LabelMode, Optimizer};
use gilab_core::data::{SyntheticConfig, SyntheticKind};
use gilab_core::fed::{Algorithm, ClientConfig, DefenseConfig};
use gilab_core::guide::DenoiserConfig;
use gilab_core::nn::LayerSpec;
use gilab_core::rng;
use gilab_core::train::FitConfig;

use crate::CliError;

const SEED_MODEL: u64 = 1;
const SEED_VICTIM: u64 = 2;
const SEED_SURROGATE: u64 = 3;
const SEED_ATTACK: u64 = 4;
const SEED_COLLECT: u64 = 5;
const SEED_DENOISER: u64 = 6;
const SEED_DENOISER_SHUFFLE: u64 = 7;
const SEED_PROBE: u64 = 8;
const SEED_PROBE_SHUFFLE: u64 = 9;
const SEED_CLIENT_SHUFFLE: u64 = 10;
const SEED_DEFENSE: u64 = 11;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    output_dir: PathBuf,
    seed: Option<u64>,
    victim_batches: Option<usize>,
    model: RawModel,
    dataset: RawDatasets,
    client: RawClient,
    attack: RawAttack,
    defense: Option<RawDefense>,
    guide: Option<RawGuide>,
    denoiser: Option<RawDenoiser>,
    probe: Option<RawProbe>,
    metrics: Option<RawMetrics>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    input: Vec<usize>,
    layers: Vec<LayerSpec>,
    seed: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDatasets {
    victim: RawSource,
    surrogate: RawSource,
}

#[derive(Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SourceKind {
    PngDir,
    Synthetic,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSource {
    kind: SourceKind,
    path: Option<PathBuf>,
    generator: Option<SyntheticKind>,
    count: Option<usize>,
    channels: Option<usize>,
    height: Option<usize>,
    width: Option<usize>,
    classes: Option<usize>,
    seed: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClient {
    algorithm: Algorithm,
    batch_size: usize,
    local_epochs: Option<usize>,
    lr: Option<f64>,
    shuffle_seed: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAttack {
    iterations: usize,
    lr: Option<f64>,
    optimizer: Option<Optimizer>,
    grad_loss: Option<GradLoss>,
    tv_weight: Option<f64>,
    init: Option<InitKind>,
    label_mode: Option<LabelMode>,
    snapshot_iters: Option<Vec<usize>>,
    seed: Option<u64>,
    progress_every: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDefense {
    dp_sigma: Option<f64>,
    qsgd_bits: Option<u32>,
    topk_keep_fraction: Option<f64>,
    seed: Option<u64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGuide {
    snapshot_iters: Option<Vec<usize>>,
    pairs: Option<usize>,
    scale: Option<usize>,
    seed: Option<u64>,
    denoise_iters: Option<Vec<usize>>,
    blend: Option<Vec<RawBlend>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBlend {
    checkpoint: PathBuf,
    weight: f64,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDenoiser {
    features: Option<usize>,
    depth: Option<usize>,
    seed: Option<u64>,
    fit: Option<RawFit>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProbe {
    layers: Vec<LayerSpec>,
    seed: Option<u64>,
    fit: Option<RawFit>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFit {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    optimizer: Option<Optimizer>,
    shuffle_seed: Option<u64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMetrics {
    use_probe: Option<bool>,
    probe_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelSpec {
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceSpec {
    PngDir { path: String },
    Synthetic(SyntheticConfig),
}

#[derive(Clone, Debug, Serialize)]
pub struct BlendSpec {
    pub checkpoint: String,
    pub weight: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GuideSpec {
    /// Attack iterations harvested during `collect`.
    pub snapshot_iters: BTreeSet<usize>,
    /// Total denoising pairs `collect` gathers.
    pub pairs: usize,
    /// Latent resolution factor for collection and guided runs.
    pub scale: usize,
    pub seed: u64,
    /// Iterations at which `guide` applies the denoiser.
    pub denoise_iters: BTreeSet<usize>,
    /// Explicit denoiser checkpoints; empty means "use this run's
    /// train-denoiser output".
    pub blend: Vec<BlendSpec>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeSpec {
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
    pub fit: FitConfig,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsSpec {
    pub use_probe: bool,
    pub probe_checkpoint: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Experiment {
    pub output_dir: PathBuf,
    pub seed: u64,
    pub victim_batches: usize,
    pub model: ModelSpec,
    pub victim: SourceSpec,
    pub surrogate: SourceSpec,
    pub client: ClientConfig,
    pub attack: AttackConfig,
    /// Progress JSONL cadence in iterations; 0 disables.
    pub progress_every: usize,
    pub defense: Option<DefenseConfig>,
    pub guide: GuideSpec,
    pub denoiser: DenoiserConfig,
    pub probe: Option<ProbeSpec>,
    pub metrics: MetricsSpec,
}

impl Experiment {
    /// Digest of everything that determines results. `output_dir` is
    /// excluded so an experiment can be relocated without orphaning its
    /// artifacts.
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct View<'a> {
            seed: u64,
            victim_batches: usize,
            model: &'a ModelSpec,
            victim: &'a SourceSpec,
            surrogate: &'a SourceSpec,
            client: &'a ClientConfig,
            attack: &'a AttackConfig,
            progress_every: usize,
            defense: &'a Option<DefenseConfig>,
            guide: &'a GuideSpec,
            denoiser: &'a DenoiserConfig,
            probe: &'a Option<ProbeSpec>,
            metrics: &'a MetricsSpec,
        }
        json_digest(&View {
            seed: self.seed,
            victim_batches: self.victim_batches,
            model: &self.model,
            victim: &self.victim,
            surrogate: &self.surrogate,
            client: &self.client,
            attack: &self.attack,
            progress_every: self.progress_every,
            defense: &self.defense,
            guide: &self.guide,
            denoiser: &self.denoiser,
            probe: &self.probe,
            metrics: &self.metrics,
        })
    }

    pub fn attack_digest(&self) -> String {
        json_digest(&self.attack)
    }

    pub fn defense_digest(&self) -> String {
        json_digest(&self.defense)
    }
}

fn json_digest<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config types serialize");
    let mut h = Sha256::new();
    h.update(&bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load(
    path: &Path,
    seed_flag: Option<u64>,
    overrides: &[(String, String)],
) -> Result<Experiment, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: toml::Value = text
        .parse()
        .map_err(|e| CliError::Config(format!("{} is not valid TOML: {e}", path.display())))?;
    apply_overrides(&mut value, overrides)?;
    let raw: RawConfig = value
        .try_into()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    resolve(raw, seed_flag)
}

/// Sets `--a.b.c value` flags into the parsed TOML tree before
/// deserialization, so the flag vocabulary is exactly the config schema.
/// Only scalar fields may be overridden.
fn apply_overrides(root: &mut toml::Value, overrides: &[(String, String)]) -> Result<(), CliError> {
    for (path, raw) in overrides {
        let segments: Vec<&str> = path.split('.').collect();
        if segments.iter().any(|s| s.is_empty()) {
            return Err(CliError::Config(format!(
                "override path {path:?} has an empty segment"
            )));
        }
        let mut cur = &mut *root;
        for seg in &segments[..segments.len() - 1] {
            let table = cur.as_table_mut().ok_or_else(|| {
                CliError::Config(format!("--{path}: {seg:?} does not name a table"))
            })?;
            cur = table
                .entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        let last = segments[segments.len() - 1];
        let table = cur.as_table_mut().ok_or_else(|| {
            CliError::Config(format!("--{path}: parent of {last:?} is not a table"))
        })?;
        if let Some(existing) = table.get(last) {
            if existing.is_table() || existing.is_array() {
                return Err(CliError::Config(format!(
                    "--{path}: only scalar fields can be overridden"
                )));
            }
        }
        table.insert(last.to_string(), parse_scalar(raw));
    }
    Ok(())
}

fn parse_scalar(s: &str) -> toml::Value {
    if let Ok(b) = s.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = s.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = s.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(s.to_string())
}

fn resolve(raw: RawConfig, seed_flag: Option<u64>) -> Result<Experiment, CliError> {
    let master = seed_flag.or(raw.seed).unwrap_or(0);
    let derived = |stream: u64| rng::derive(master, stream);

    if raw.model.input.len() != 3 {
        return Err(CliError::Config(format!(
            "model.input must be [channels, height, width], got {:?}",
            raw.model.input
        )));
    }
    if raw.model.input[0] != 1 && raw.model.input[0] != 3 {
        return Err(CliError::Config(
            "model.input channels must be 1 (grayscale) or 3 (RGB)".into(),
        ));
    }
    if raw.model.layers.is_empty() {
        return Err(CliError::Config("model.layers must not be empty".into()));
    }
    let model = ModelSpec {
        input: raw.model.input,
        layers: raw.model.layers,
        seed: raw.model.seed.unwrap_or_else(|| derived(SEED_MODEL)),
    };

    let victim = resolve_source(raw.dataset.victim, derived(SEED_VICTIM), "dataset.victim")?;
    let surrogate = resolve_source(
        raw.dataset.surrogate,
        derived(SEED_SURROGATE),
        "dataset.surrogate",
    )?;

    let client = ClientConfig {
        algorithm: raw.client.algorithm,
        batch_size: raw.client.batch_size,
        local_epochs: raw.client.local_epochs.unwrap_or(1),
        lr: raw.client.lr.unwrap_or(0.1),
        shuffle_seed: raw
            .client
            .shuffle_seed
            .unwrap_or_else(|| derived(SEED_CLIENT_SHUFFLE)),
    };
    client
        .validate()
        .map_err(|e| CliError::Config(format!("client: {e}")))?;

    let a = raw.attack;
    let iterations = a.iterations;
    let progress_every = a.progress_every.unwrap_or_else(|| (iterations / 10).max(1));
    let attack = AttackConfig {
        iterations,
        lr: a.lr.unwrap_or(0.1),
        optimizer: a.optimizer.unwrap_or_else(Optimizer::adam),
        grad_loss: a.grad_loss.unwrap_or(GradLoss::SquaredL2),
        tv_weight: a.tv_weight.unwrap_or(0.0),
        init: a.init.unwrap_or(InitKind::Uniform01),
        label_mode: a.label_mode.unwrap_or(LabelMode::Known),
        snapshot_iters: a.snapshot_iters.unwrap_or_default().into_iter().collect(),
        seed: a.seed.unwrap_or_else(|| derived(SEED_ATTACK)),
    };
    attack
        .validate()
        .map_err(|e| CliError::Config(format!("attack: {e}")))?;
    if attack.label_mode == LabelMode::Inferred && client.algorithm == Algorithm::FedAvg {
        return Err(CliError::Config(
            "label inference reads a gradient update; use attack.label_mode = \"optimized\" \
             with fed_avg"
                .into(),
        ));
    }

    let defense = raw.defense.map(|r| DefenseConfig {
        dp_sigma: r.dp_sigma.unwrap_or(0.0),
        qsgd_bits: r.qsgd_bits,
        topk_keep_fraction: r.topk_keep_fraction,
        seed: r.seed.unwrap_or_else(|| derived(SEED_DEFENSE)),
    });
    if let Some(d) = &defense {
        d.validate()
            .map_err(|e| CliError::Config(format!("defense: {e}")))?;
    }

    let g = raw.guide.unwrap_or_default();
    let guide = GuideSpec {
        snapshot_iters: g.snapshot_iters.unwrap_or_default().into_iter().collect(),
        pairs: g.pairs.unwrap_or(0),
        scale: g.scale.unwrap_or(1),
        seed: g.seed.unwrap_or_else(|| derived(SEED_COLLECT)),
        denoise_iters: g.denoise_iters.unwrap_or_default().into_iter().collect(),
        blend: g
            .blend
            .unwrap_or_default()
            .into_iter()
            .map(|b| BlendSpec {
                checkpoint: b.checkpoint.to_string_lossy().into_owned(),
                weight: b.weight,
            })
            .collect(),
    };
    if !matches!(guide.scale, 1 | 2 | 4) {
        return Err(CliError::Config(format!(
            "guide.scale must be 1, 2 or 4, got {}",
            guide.scale
        )));
    }
    for (field, set) in [
        ("guide.snapshot_iters", &guide.snapshot_iters),
        ("guide.denoise_iters", &guide.denoise_iters),
    ] {
        if let Some(&bad) = set.iter().find(|&&t| t == 0 || t > iterations) {
            return Err(CliError::Config(format!(
                "{field} entry {bad} is outside 1..={iterations}"
            )));
        }
    }
    for b in &guide.blend {
        if !b.weight.is_finite() || b.weight < 0.0 {
            return Err(CliError::Config(format!(
                "guide.blend weight {} for {} must be a finite non-negative number",
                b.weight, b.checkpoint
            )));
        }
    }

    let dn = raw.denoiser.unwrap_or_default();
    let denoiser = DenoiserConfig {
        features: dn.features.unwrap_or(32),
        depth: dn.depth.unwrap_or(8),
        seed: dn.seed.unwrap_or_else(|| derived(SEED_DENOISER)),
        fit: resolve_fit(dn.fit.unwrap_or_default(), derived(SEED_DENOISER_SHUFFLE)),
    };
    denoiser
        .fit
        .validate()
        .map_err(|e| CliError::Config(format!("denoiser.fit: {e}")))?;

    let probe = raw
        .probe
        .map(|p| -> Result<ProbeSpec, CliError> {
            if p.layers.is_empty() {
                return Err(CliError::Config("probe.layers must not be empty".into()));
            }
            let fit = resolve_fit(p.fit.unwrap_or_default(), derived(SEED_PROBE_SHUFFLE));
            fit.validate()
                .map_err(|e| CliError::Config(format!("probe.fit: {e}")))?;
            Ok(ProbeSpec {
                layers: p.layers,
                seed: p.seed.unwrap_or_else(|| derived(SEED_PROBE)),
                fit,
            })
        })
        .transpose()?;

    let m = raw.metrics.unwrap_or_default();
    let metrics = MetricsSpec {
        use_probe: m.use_probe.unwrap_or(false),
        probe_checkpoint: m
            .probe_checkpoint
            .map(|p| p.to_string_lossy().into_owned()),
    };

    let victim_batches = raw.victim_batches.unwrap_or(1);
    if victim_batches == 0 {
        return Err(CliError::Config("victim_batches must be positive".into()));
    }

    Ok(Experiment {
        output_dir: raw.output_dir,
        seed: master,
        victim_batches,
        model,
        victim,
        surrogate,
        client,
        attack,
        progress_every,
        defense,
        guide,
        denoiser,
        probe,
        metrics,
    })
}

fn resolve_fit(raw: RawFit, shuffle_default: u64) -> FitConfig {
    FitConfig {
        epochs: raw.epochs.unwrap_or(20),
        batch_size: raw.batch_size.unwrap_or(16),
        lr: raw.lr.unwrap_or(1e-3),
        optimizer: raw.optimizer.unwrap_or_else(Optimizer::adam),
        shuffle_seed: raw.shuffle_seed.unwrap_or(shuffle_default),
    }
}

fn resolve_source(raw: RawSource, default_seed: u64, at: &str) -> Result<SourceSpec, CliError> {
    match raw.kind {
        SourceKind::PngDir => {
            let path = raw
                .path
                .ok_or_else(|| CliError::Config(format!("{at}.path is required for png_dir")))?;
            if raw.generator.is_some() || raw.count.is_some() || raw.classes.is_some() {
                return Err(CliError::Config(format!(
                    "{at}: generator fields are not used by kind = \"png_dir\""
                )));
            }
            Ok(SourceSpec::PngDir {
                path: path.to_string_lossy().into_owned(),
            })
        }
        SourceKind::Synthetic => {
            let need = |field: &str, v: Option<usize>| {
                v.ok_or_else(|| {
                    CliError::Config(format!("{at}.{field} is required for synthetic datasets"))
                })
            };
            let cfg = SyntheticConfig {
                kind: raw.generator.ok_or_else(|| {
                    CliError::Config(format!(
                        "{at}.generator (\"shapes\" or \"textures\") is required"
                    ))
                })?,
                count: need("count", raw.count)?,
                channels: need("channels", raw.channels)?,
                height: need("height", raw.height)?,
                width: need("width", raw.width)?,
                classes: need("classes", raw.classes)?,
                seed: raw.seed.unwrap_or(default_seed),
            };
            cfg.validate()
                .map_err(|e| CliError::Config(format!("{at}: {e}")))?;
            Ok(SourceSpec::Synthetic(cfg))
        }
    }
}
