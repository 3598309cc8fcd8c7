//! Client update simulation: FedSGD, FedAVG, aggregation, and the defenses
//! applied to updates before they leave the client.
//!
//! Defense notes. Top-k ranks the update as one flat vector (map order, then
//! flat index) rather than per tensor, so `keep_fraction` has a single global
//! meaning; ties break toward the lower flat index. QSGD uses max-norm
//! stochastic rounding with `2^bits - 1` intervals per tensor and is unbiased
//! conditional on the input. When Gaussian noise is combined with a
//! compressor, compression runs first and noise is added to the compressed
//! update.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{self, Model, Reduction};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    FedSgd,
    FedAvg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub algorithm: Algorithm,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub lr: f64,
    /// Seed for the client's minibatch shuffling (FedAVG only). Kept in the
    /// config because the attacker's unrolled replay must reproduce the
    /// exact minibatch order.
    pub shuffle_seed: u64,
}

impl ClientConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("client batch_size must be positive"));
        }
        if self.local_epochs == 0 {
            return Err(Error::invalid("client local_epochs must be positive"));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::invalid(format!(
                "client lr must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateKind {
    /// Sum over the batch of per-sample loss gradients (FedSGD).
    AggregatedGradient,
    /// theta_initial - theta_final after local training (FedAVG).
    WeightDelta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateMeta {
    pub client: ClientConfig,
    /// Number of client samples behind this update (batch size for FedSGD,
    /// local dataset size for FedAVG).
    pub dataset_size: usize,
    pub round: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Update {
    pub kind: UpdateKind,
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: UpdateMeta,
}

impl Update {
    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    fn map_tensors(&self, mut f: impl FnMut(&str, &Tensor) -> Tensor) -> Update {
        Update {
            kind: self.kind,
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), f(k, v)))
                .collect(),
            meta: self.meta.clone(),
        }
    }
}

/// FedSGD: the client shares the summed gradient of one batch.
pub fn fedsgd_update(
    model: &Model,
    batch: &Tensor,
    labels: &[usize],
    cfg: &ClientConfig,
) -> Result<Update> {
    cfg.validate()?;
    if cfg.algorithm != Algorithm::FedSgd {
        return Err(Error::invalid("fedsgd_update called with non-FedSGD config"));
    }
    let rows = batch.shape().first().copied().unwrap_or(0);
    if rows != cfg.batch_size {
        return Err(Error::invalid(format!(
            "batch has {rows} rows but client batch_size is {}",
            cfg.batch_size
        )));
    }
    if labels.len() != rows {
        return Err(Error::invalid(format!(
            "{} labels for batch of {rows}",
            labels.len()
        )));
    }
    let grads = nn::loss_and_grads_reduced(model, batch, labels, Reduction::Sum)?;
    Ok(Update {
        kind: UpdateKind::AggregatedGradient,
        tensors: grads.by_param,
        meta: UpdateMeta {
            client: cfg.clone(),
            dataset_size: rows,
            round: 0,
        },
    })
}

/// The minibatch index plan for one FedAVG run: one index list per local
/// step. Exposed so the attack can replay the exact same plan when unrolling.
pub fn fedavg_batch_plan(n: usize, cfg: &ClientConfig) -> Vec<Vec<usize>> {
    let mut rng = Rng::new(cfg.shuffle_seed);
    let mut plan = Vec::new();
    for _ in 0..cfg.local_epochs {
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        for chunk in idx.chunks(cfg.batch_size) {
            plan.push(chunk.to_vec());
        }
    }
    plan
}

/// FedAVG: local epochs of minibatch SGD from the global model; the client
/// shares theta_initial - theta_final. The final minibatch of an epoch may
/// be smaller than batch_size when it does not divide the dataset.
pub fn fedavg_update(
    model: &Model,
    images: &Tensor,
    labels: &[usize],
    cfg: &ClientConfig,
) -> Result<Update> {
    cfg.validate()?;
    if cfg.algorithm != Algorithm::FedAvg {
        return Err(Error::invalid("fedavg_update called with non-FedAVG config"));
    }
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::invalid("fedavg_update needs a non-empty local dataset"));
    }
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} samples", labels.len())));
    }
    if cfg.batch_size > n {
        return Err(Error::invalid(format!(
            "client batch_size {} exceeds local dataset size {n}",
            cfg.batch_size
        )));
    }

    let mut current = model.clone();
    for chunk in fedavg_batch_plan(n, cfg) {
        let batch = images.take_rows(&chunk)?;
        let lbl: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let grads = nn::loss_and_grads(&current, &batch, &lbl)?;
        current = nn::sgd_step(&current, &grads.by_param, cfg.lr)?;
    }

    let mut tensors = BTreeMap::new();
    for (name, theta0) in &model.params {
        tensors.insert(name.clone(), theta0.sub(&current.params[name])?);
    }
    Ok(Update {
        kind: UpdateKind::WeightDelta,
        tensors,
        meta: UpdateMeta {
            client: cfg.clone(),
            dataset_size: n,
            round: 0,
        },
    })
}

/// Applies client updates to the global model. Gradient updates are summed;
/// weight deltas are averaged weighted by client dataset size. `eta` is the
/// server learning rate (1.0 recovers plain FedAVG averaging).
pub fn server_aggregate(global: &Model, updates: &[Update], eta: f64) -> Result<Model> {
    if updates.is_empty() {
        return Err(Error::invalid("server_aggregate needs at least one update"));
    }
    if !eta.is_finite() {
        return Err(Error::invalid("server learning rate must be finite"));
    }
    let kind = updates[0].kind;
    if updates.iter().any(|u| u.kind != kind) {
        return Err(Error::invalid("cannot aggregate updates of mixed kinds"));
    }
    for u in updates {
        for (name, t) in &u.tensors {
            let p = global
                .params
                .get(name)
                .ok_or_else(|| Error::invalid(format!("update tensor {name} not in model")))?;
            if p.shape() != t.shape() {
                return Err(Error::shape(
                    format!("update tensor {name}"),
                    p.shape(),
                    t.shape(),
                ));
            }
        }
        if u.tensors.len() != global.params.len() {
            return Err(Error::invalid("update does not cover every model parameter"));
        }
    }

    let total: f64 = match kind {
        UpdateKind::AggregatedGradient => 1.0,
        UpdateKind::WeightDelta => updates.iter().map(|u| u.meta.dataset_size as f64).sum(),
    };
    if kind == UpdateKind::WeightDelta && total <= 0.0 {
        return Err(Error::invalid("weight-delta aggregation needs positive dataset sizes"));
    }

    let mut params = BTreeMap::new();
    for (name, theta) in &global.params {
        let mut combined = Tensor::zeros(theta.shape());
        for u in updates {
            let w = match kind {
                UpdateKind::AggregatedGradient => 1.0,
                UpdateKind::WeightDelta => u.meta.dataset_size as f64 / total,
            };
            combined = combined.zip_map(&u.tensors[name], |acc, v| acc + w * v)?;
        }
        params.insert(name.clone(), theta.zip_map(&combined, |p, c| p - eta * c)?);
    }
    global.replace_params(params)
}

/// Adds i.i.d. Gaussian noise N(0, sigma^2) to every entry. sigma = 0 returns
/// the update unchanged, bit for bit. The stream walks tensors in map order.
pub fn apply_dp_noise(update: &Update, sigma: f64, seed: u64) -> Result<Update> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::invalid(format!("dp sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(update.clone());
    }
    let mut rng = Rng::new(seed);
    Ok(update.map_tensors(|_, t| t.map(|v| v + sigma * rng.next_normal())))
}

/// QSGD-style max-norm stochastic quantization with `2^bits - 1` intervals
/// per tensor. Each value is rounded to one of the levels
/// `sign(v) * scale * l / s`, `l` in `0..=s`, with probabilities that make
/// the result unbiased. Values already on a level pass through unchanged.
pub fn qsgd_quantize(update: &Update, bits: u32, seed: u64) -> Result<Update> {
    if bits == 0 || bits > 16 {
        return Err(Error::invalid(format!("qsgd bits must be in 1..=16, got {bits}")));
    }
    let s = ((1u32 << bits) - 1) as f64;
    let mut rng = Rng::new(seed);
    let mut result = BTreeMap::new();
    for (name, t) in &update.tensors {
        let scale = t.max_abs();
        if scale == 0.0 {
            result.insert(name.clone(), t.clone());
            continue;
        }
        let data = t
            .data()
            .iter()
            .map(|&v| {
                let u = v.abs() / scale * s;
                let lower = u.floor();
                let p = u - lower;
                let level = if rng.next_f64() < p { lower + 1.0 } else { lower };
                v.signum() * scale * level / s
            })
            .collect();
        result.insert(name.clone(), Tensor::new_unchecked(t.shape().to_vec(), data));
    }
    Ok(Update {
        kind: update.kind,
        tensors: result,
        meta: update.meta.clone(),
    })
}

/// Keeps the `ceil(keep_fraction * n)` largest-magnitude entries of the whole
/// update (n = total entries across tensors) and zeroes the rest. Ties break
/// toward the lower flat index, tensors ordered by name.
pub fn topk_sparsify(update: &Update, keep_fraction: f64) -> Result<Update> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "keep_fraction must be in (0, 1], got {keep_fraction}"
        )));
    }
    let n = update.numel();
    let k = (keep_fraction * n as f64).ceil() as usize;
    if k >= n {
        return Ok(update.clone());
    }

    let mut order: Vec<(usize, f64)> = Vec::with_capacity(n);
    let mut flat = 0usize;
    for t in update.tensors.values() {
        for &v in t.data() {
            order.push((flat, v.abs()));
            flat += 1;
        }
    }
    order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut keep = vec![false; n];
    for &(i, _) in order.iter().take(k) {
        keep[i] = true;
    }

    let mut tensors = BTreeMap::new();
    let mut flat = 0usize;
    for (name, t) in &update.tensors {
        let data = t
            .data()
            .iter()
            .map(|&v| {
                let out = if keep[flat] { v } else { 0.0 };
                flat += 1;
                out
            })
            .collect();
        tensors.insert(name.clone(), Tensor::new_unchecked(t.shape().to_vec(), data));
    }
    Ok(Update {
        kind: update.kind,
        tensors,
        meta: update.meta.clone(),
    })
}

/// What a client applies to its update before sharing it. At most one of the
/// two compressors may be active; Gaussian noise may ride on top of either.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    #[serde(default)]
    pub dp_sigma: f64,
    #[serde(default)]
    pub qsgd_bits: Option<u32>,
    #[serde(default)]
    pub topk_keep_fraction: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            dp_sigma: 0.0,
            qsgd_bits: None,
            topk_keep_fraction: None,
            seed: 0,
        }
    }
}

impl DefenseConfig {
    pub fn none() -> Self {
        DefenseConfig::default()
    }

    pub fn is_noop(&self) -> bool {
        self.dp_sigma == 0.0 && self.qsgd_bits.is_none() && self.topk_keep_fraction.is_none()
    }

    pub fn validate(&self) -> Result<()> {
        if self.qsgd_bits.is_some() && self.topk_keep_fraction.is_some() {
            return Err(Error::invalid(
                "at most one of qsgd_bits and topk_keep_fraction may be set",
            ));
        }
        if !self.dp_sigma.is_finite() || self.dp_sigma < 0.0 {
            return Err(Error::invalid("dp_sigma must be >= 0"));
        }
        if let Some(b) = self.qsgd_bits {
            if b == 0 || b > 16 {
                return Err(Error::invalid("qsgd_bits must be in 1..=16"));
            }
        }
        if let Some(f) = self.topk_keep_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::invalid("topk_keep_fraction must be in (0, 1]"));
            }
        }
        Ok(())
    }
}

/// Runs the configured defenses on one update. `round` separates the noise
/// and rounding streams of successive rounds.
pub fn apply_defense(update: &Update, cfg: &DefenseConfig, round: u64) -> Result<Update> {
    cfg.validate()?;
    let mut out = update.clone();
    if let Some(bits) = cfg.qsgd_bits {
        out = qsgd_quantize(&out, bits, rng::derive(cfg.seed, round * 2 + 1))?;
    }
    if let Some(keep) = cfg.topk_keep_fraction {
        out = topk_sparsify(&out, keep)?;
    }
    if cfg.dp_sigma > 0.0 {
        out = apply_dp_noise(&out, cfg.dp_sigma, rng::derive(cfg.seed, round * 2))?;
    }
    Ok(out)
}

/// File headers reuse the checkpoint container with the update metadata
/// embedded as JSON.
pub fn save_update(path: &Path, update: &Update) -> Result<()> {
    let header = serde_json::json!({
        "kind": "update",
        "update_kind": update.kind,
        "meta": update.meta,
    });
    checkpoint::save_tensors(path, &header, &update.tensors)
}

pub fn load_update(path: &Path) -> Result<Update> {
    let (header, tensors) = load_header(path)?;
    Ok(Update {
        kind: header.0,
        tensors,
        meta: header.1,
    })
}

fn load_header(path: &Path) -> Result<((UpdateKind, UpdateMeta), BTreeMap<String, Tensor>)> {
    let (header, tensors) = checkpoint::load_tensors(path)?;
    let bad = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message: msg,
    };
    if header.get("kind").and_then(|v| v.as_str()) != Some("update") {
        return Err(bad("not an update checkpoint".into()));
    }
    let kind: UpdateKind = serde_json::from_value(
        header.get("update_kind").cloned().unwrap_or_default(),
    )
    .map_err(|e| bad(format!("update_kind: {e}")))?;
    let meta: UpdateMeta = serde_json::from_value(header.get("meta").cloned().unwrap_or_default())
        .map_err(|e| bad(format!("meta: {e}")))?;
    Ok(((kind, meta), tensors))
}
