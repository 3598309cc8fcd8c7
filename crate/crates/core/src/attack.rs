//! Gradient inversion: reconstructing a client's training batch from the
//! update it shared.
//!
//! The attack maintains dummy inputs x_hat (and optionally dummy label
//! logits), simulates the client's computation on them inside the tape, and
//! minimises a gradient-match loss plus a total-variation penalty by descent
//! on x_hat. Because the client computation itself contains a backward pass,
//! every step differentiates through differentiation; the tape's
//! gradients-as-nodes design makes that exact.
//!
//! For FedSGD updates the candidate is the summed batch gradient. For FedAVG
//! updates the candidate is the full unrolled local training run: the
//! attacker replays the client's minibatch plan (which is seeded and
//! therefore reproducible) as tape operations and matches the resulting
//! weight delta.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fed::{fedavg_batch_plan, ClientConfig, Update, UpdateKind};
use crate::nn::{self, LayerSpec, Model, Reduction};
use crate::rng::Rng;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradLoss {
    /// Squared L2 distance between candidate and target update.
    SquaredL2,
    /// 1 - cosine similarity over the flattened update; 1.0 if either side
    /// has zero norm.
    NegativeCosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Uniform in [0,1).
    Uniform01,
    /// Normal(0.5, 0.25) clamped to [0,1].
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Ground-truth labels are supplied by the caller.
    Known,
    /// Labels are read off the final-layer bias gradient before the attack.
    Inferred,
    /// Soft labels are optimized jointly with the images.
    Optimized,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Optimizer {
    pub fn adam() -> Optimizer {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Total attack iterations T.
    pub iterations: usize,
    /// Base learning rate; decays on a cosine schedule to 10% at the end.
    pub lr: f64,
    pub optimizer: Optimizer,
    pub grad_loss: GradLoss,
    pub tv_weight: f64,
    pub init: InitKind,
    pub label_mode: LabelMode,
    /// Iterations (1-based) after which the current x_hat is emitted as a
    /// snapshot.
    #[serde(default)]
    pub snapshot_iters: BTreeSet<usize>,
    /// Seed for the dummy-input initialisation.
    pub seed: u64,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("attack iterations must be positive"));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::invalid("attack lr must be finite and non-negative"));
        }
        if !self.tv_weight.is_finite() || self.tv_weight < 0.0 {
            return Err(Error::invalid("tv_weight must be finite and non-negative"));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                return Err(Error::invalid("adam betas must lie in [0,1)"));
            }
            if !eps.is_finite() || eps <= 0.0 {
                return Err(Error::invalid("adam eps must be positive"));
            }
        }
        for &s in &self.snapshot_iters {
            if s == 0 || s > self.iterations {
                return Err(Error::invalid(format!(
                    "snapshot iteration {s} outside 1..={}",
                    self.iterations
                )));
            }
        }
        Ok(())
    }
}

/// First and second Adam moment estimates plus the step count used for bias
/// correction. The count restarts on `reset`, so a reset behaves like a
/// fresh optimizer.
#[derive(Clone, Debug)]
pub struct Moments {
    m: Tensor,
    v: Tensor,
    t: u32,
}

impl Moments {
    pub(crate) fn zeros(shape: &[usize]) -> Moments {
        Moments {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }

    fn reset(&mut self) {
        self.m = Tensor::zeros(self.m.shape());
        self.v = Tensor::zeros(self.v.shape());
        self.t = 0;
    }
}

#[derive(Clone, Debug)]
pub struct ReconstructionState {
    /// Current reconstruction [B,C,h,w]. For reduced-space attacks this is
    /// the low-resolution latent; otherwise full resolution.
    pub x_hat: Tensor,
    /// Hard labels used by the candidate simulation (known or inferred).
    /// Empty when labels are optimized.
    pub labels: Vec<usize>,
    /// Soft-label logits [B,K], present only in optimized mode.
    pub label_logits: Option<Tensor>,
    /// Number of completed steps.
    pub iteration: usize,
    /// Total objective at the last step (gradient match + weighted TV).
    pub last_loss: f64,
    /// Gradient-match term alone at the last step.
    pub last_grad_loss: f64,
    /// Best gradient-match value seen so far.
    pub best_grad_loss: f64,
    opt_x: Moments,
    opt_logits: Option<Moments>,
}

impl ReconstructionState {
    /// Clears optimizer moments. Call after replacing `x_hat` from outside
    /// the descent loop (for instance with a denoised version): the old
    /// moments describe a trajectory the new point is not on. Moments are
    /// rebuilt at the current `x_hat` shape, so this also repairs the state
    /// after a shape-changing replacement.
    pub fn reset_moments(&mut self) {
        self.opt_x = Moments::zeros(self.x_hat.shape());
        if let Some(m) = &mut self.opt_logits {
            m.reset();
        }
    }

    /// Batch size of the reconstruction.
    pub fn batch(&self) -> usize {
        self.x_hat.shape()[0]
    }
}

/// Cosine learning-rate factor for 0-based step `iter` of `total`: 1.0 at
/// the first step, 0.1 at the last.
pub fn cosine_lr_factor(iter: usize, total: usize) -> f64 {
    if total <= 1 {
        return 1.0;
    }
    let phase = std::f64::consts::PI * iter as f64 / (total - 1) as f64;
    0.1 + 0.9 * 0.5 * (1.0 + phase.cos())
}

/// Reads the batch labels off an aggregated-gradient update: each sample
/// with label c pushes the final-layer bias gradient at c negative, so the
/// most negative entries name the labels present.
///
/// Returns `batch_size` labels in ascending class order. If fewer classes
/// than needed have negative gradient entries, the most negative classes are
/// repeated (label multiplicity inside a batch is not identifiable from the
/// sign pattern alone).
pub fn infer_labels(update: &Update, model: &Model) -> Result<Vec<usize>> {
    if update.kind != UpdateKind::AggregatedGradient {
        return Err(Error::invalid(
            "label inference reads a gradient update; use optimized labels for weight deltas",
        ));
    }
    let last = model.layers.len().checked_sub(1).ok_or_else(|| Error::invalid("empty model"))?;
    if !matches!(model.layers[last], LayerSpec::Dense { .. }) {
        return Err(Error::invalid("label inference needs a final dense layer"));
    }
    let bias_name = format!("l{last}.b");
    let g = update
        .tensors
        .get(&bias_name)
        .ok_or_else(|| Error::invalid(format!("update has no tensor {bias_name}")))?;

    let b = update.meta.client.batch_size;
    let mut entries: Vec<(f64, usize)> =
        g.data().iter().copied().enumerate().map(|(c, v)| (v, c)).collect();
    entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let negatives: Vec<usize> = entries.iter().take_while(|e| e.0 < 0.0).map(|e| e.1).collect();
    let pool: Vec<usize> = if negatives.is_empty() {
        entries.iter().map(|e| e.1).collect()
    } else {
        negatives
    };
    let mut picked: Vec<usize> = pool.iter().copied().take(b).collect();
    let mut i = 0;
    while picked.len() < b {
        picked.push(pool[i % pool.len()]);
        i += 1;
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Total-variation penalty on an image batch [B,C,H,W]: the L1 norm of both
/// forward differences.
pub fn tv_penalty(tape: &mut Tape, x: VarId) -> Result<VarId> {
    let dh = tape.diff_h(x)?;
    let ah = tape.abs(dh)?;
    let sh = tape.sum_all(ah)?;
    let dw = tape.diff_w(x)?;
    let aw = tape.abs(dw)?;
    let sw = tape.sum_all(aw)?;
    tape.add(sh, sw)
}

/// Distance between a candidate update (tape nodes, keyed like model params)
/// and the observed update. Differentiable in the candidate.
pub fn grad_match_loss(
    tape: &mut Tape,
    candidate: &BTreeMap<String, VarId>,
    target: &Update,
    loss: GradLoss,
) -> Result<VarId> {
    if candidate.len() != target.tensors.len()
        || !candidate.keys().eq(target.tensors.keys())
    {
        return Err(Error::invalid("candidate and target updates have different tensors"));
    }
    for (name, &c) in candidate {
        let got = tape.value(c).shape();
        let want = target.tensors[name].shape();
        if got != want {
            return Err(Error::shape(format!("update tensor {name}"), want, got));
        }
    }

    match loss {
        GradLoss::SquaredL2 => {
            let mut acc: Option<VarId> = None;
            for (name, &c) in candidate {
                let t = tape.constant(target.tensors[name].clone());
                let d = tape.sub(c, t)?;
                let sq = tape.mul(d, d)?;
                let s = tape.sum_all(sq)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, s)?,
                    None => s,
                });
            }
            acc.ok_or_else(|| Error::invalid("empty update"))
        }
        GradLoss::NegativeCosine => {
            let target_norm2: f64 = target
                .tensors
                .values()
                .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
                .sum();
            let mut dot: Option<VarId> = None;
            let mut cand_norm2: Option<VarId> = None;
            for (name, &c) in candidate {
                let t = tape.constant(target.tensors[name].clone());
                let ct = tape.mul(c, t)?;
                let s = tape.sum_all(ct)?;
                dot = Some(match dot {
                    Some(a) => tape.add(a, s)?,
                    None => s,
                });
                let cc = tape.mul(c, c)?;
                let s2 = tape.sum_all(cc)?;
                cand_norm2 = Some(match cand_norm2 {
                    Some(a) => tape.add(a, s2)?,
                    None => s2,
                });
            }
            let dot = dot.ok_or_else(|| Error::invalid("empty update"))?;
            let cand_norm2 = cand_norm2.expect("dot implies norm");
            if target_norm2 == 0.0 || tape.value(cand_norm2).data()[0] == 0.0 {
                return Ok(tape.constant(Tensor::scalar(1.0)));
            }
            let cn = tape.sqrt(cand_norm2)?;
            let denom = tape.affine(cn, target_norm2.sqrt(), 0.0)?;
            let ratio = tape.div(dot, denom)?;
            tape.affine(ratio, -1.0, 1.0)
        }
    }
}

enum LabelVars {
    Hard(Vec<usize>),
    /// Softmax probabilities [B,K] as a tape node.
    Soft(VarId),
}

/// Simulated FedSGD update: summed batch gradient as tape nodes.
fn candidate_fedsgd(
    tape: &mut Tape,
    model: &Model,
    x_img: VarId,
    labels: &LabelVars,
) -> Result<BTreeMap<String, VarId>> {
    let params = model.insert_params(tape, true);
    let graph = nn::build_graph(tape, model, x_img, &params)?;
    let loss = match labels {
        LabelVars::Hard(l) => nn::cross_entropy(tape, graph.output, l, Reduction::Sum)?,
        LabelVars::Soft(p) => nn::cross_entropy_soft(tape, graph.output, *p, Reduction::Sum)?,
    };
    let names: Vec<String> = params.keys().cloned().collect();
    let targets: Vec<VarId> = params.values().copied().collect();
    let grads = tape.backward(loss, &targets)?;
    let mut out = BTreeMap::new();
    for (name, grad) in names.into_iter().zip(grads) {
        let id = match grad {
            Some(id) => id,
            None => tape.constant(Tensor::zeros(model.params[&name].shape())),
        };
        out.insert(name, id);
    }
    Ok(out)
}

/// Simulated FedAVG update: replays the client's seeded minibatch plan as an
/// unrolled chain of SGD steps and returns theta_initial - theta_final.
fn candidate_fedavg(
    tape: &mut Tape,
    model: &Model,
    x_img: VarId,
    labels: &LabelVars,
    client: &ClientConfig,
) -> Result<BTreeMap<String, VarId>> {
    let n = tape.value(x_img).shape()[0];
    let theta0 = model.insert_params(tape, true);
    let plan = fedavg_batch_plan(n, client);
    let mut cur = theta0.clone();
    for chunk in &plan {
        let idx = Arc::new(chunk.clone());
        let xb = tape.take_rows(x_img, idx.clone())?;
        let graph = nn::build_graph(tape, model, xb, &cur)?;
        let loss = match labels {
            LabelVars::Hard(l) => {
                let lb: Vec<usize> = chunk.iter().map(|&i| l[i]).collect();
                nn::cross_entropy(tape, graph.output, &lb, Reduction::Mean)?
            }
            LabelVars::Soft(p) => {
                let pb = tape.take_rows(*p, idx)?;
                nn::cross_entropy_soft(tape, graph.output, pb, Reduction::Mean)?
            }
        };
        let names: Vec<String> = cur.keys().cloned().collect();
        let targets: Vec<VarId> = cur.values().copied().collect();
        let grads = tape.backward(loss, &targets)?;
        let mut next = BTreeMap::new();
        for (name, grad) in names.into_iter().zip(grads) {
            let var = cur[&name];
            let stepped = match grad {
                Some(g) => {
                    let scaled = tape.affine(g, client.lr, 0.0)?;
                    tape.sub(var, scaled)?
                }
                None => var,
            };
            next.insert(name, stepped);
        }
        cur = next;
    }
    let mut out = BTreeMap::new();
    for (name, &start) in &theta0 {
        out.insert(name.clone(), tape.sub(start, cur[name])?);
    }
    Ok(out)
}

pub(crate) fn apply_descent(x: &mut Tensor, g: &Tensor, mom: &mut Moments, opt: &Optimizer, lr: f64) {
    match *opt {
        Optimizer::Sgd => {
            *x = x
                .zip_map(g, |xi, gi| xi - lr * gi)
                .expect("gradient shape matches state");
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            mom.t += 1;
            mom.m = mom
                .m
                .zip_map(g, |mi, gi| beta1 * mi + (1.0 - beta1) * gi)
                .expect("moment shape matches gradient");
            mom.v = mom
                .v
                .zip_map(g, |vi, gi| beta2 * vi + (1.0 - beta2) * gi * gi)
                .expect("moment shape matches gradient");
            let c1 = 1.0 - beta1.powi(mom.t as i32);
            let c2 = 1.0 - beta2.powi(mom.t as i32);
            let m = &mom.m;
            let v = &mom.v;
            let step = m
                .zip_map(v, |mi, vi| lr * (mi / c1) / ((vi / c2).sqrt() + eps))
                .expect("moments share shape");
            *x = x.zip_map(&step, |xi, si| xi - si).expect("step shape matches state");
        }
    }
}

/// Fresh reconstruction state for an attack on `update`.
pub fn init_state(
    model: &Model,
    update: &Update,
    cfg: &AttackConfig,
    known_labels: Option<&[usize]>,
) -> Result<ReconstructionState> {
    init_state_scaled(model, update, cfg, known_labels, 1)
}

pub(crate) fn init_state_scaled(
    model: &Model,
    update: &Update,
    cfg: &AttackConfig,
    known_labels: Option<&[usize]>,
    factor: usize,
) -> Result<ReconstructionState> {
    cfg.validate()?;
    if !matches!(factor, 1 | 2 | 4) {
        return Err(Error::invalid(format!("reduction factor {factor} not in {{1,2,4}}")));
    }
    let n = match update.kind {
        UpdateKind::AggregatedGradient => update.meta.client.batch_size,
        UpdateKind::WeightDelta => update.meta.dataset_size,
    };
    if n == 0 {
        return Err(Error::invalid("update describes an empty batch"));
    }
    if model.input_shape.len() != 3 {
        return Err(Error::invalid("attacks expect [C,H,W] model inputs"));
    }
    let (c, h, w) = (model.input_shape[0], model.input_shape[1], model.input_shape[2]);
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(format!(
            "image {h}x{w} not divisible by reduction factor {factor}"
        )));
    }
    let latent = [n, c, h / factor, w / factor];

    let mut rng = Rng::new(cfg.seed);
    let x0 = match cfg.init {
        InitKind::Uniform01 => Tensor::uniform(&latent, 0.0, 1.0, &mut rng),
        InitKind::Gaussian => Tensor::normal(&latent, 0.5, 0.25, &mut rng).clamp(0.0, 1.0),
    };

    let classes = model.num_classes()?;
    let (labels, label_logits) = match cfg.label_mode {
        LabelMode::Known => {
            let l = known_labels
                .ok_or_else(|| Error::invalid("label_mode=known requires labels"))?;
            if l.len() != n {
                return Err(Error::invalid(format!(
                    "{} known labels for batch of {n}",
                    l.len()
                )));
            }
            for &label in l {
                if label >= classes {
                    return Err(Error::LabelOutOfRange { label, classes });
                }
            }
            (l.to_vec(), None)
        }
        LabelMode::Inferred => (infer_labels(update, model)?, None),
        LabelMode::Optimized => (Vec::new(), Some(Tensor::zeros(&[n, classes]))),
    };

    let opt_logits = label_logits.as_ref().map(|t| Moments::zeros(t.shape()));
    Ok(ReconstructionState {
        opt_x: Moments::zeros(&latent),
        opt_logits,
        x_hat: x0,
        labels,
        label_logits,
        iteration: 0,
        last_loss: f64::INFINITY,
        last_grad_loss: f64::INFINITY,
        best_grad_loss: f64::INFINITY,
    })
}

/// One descent step on the attack objective.
pub fn attack_step(
    state: &mut ReconstructionState,
    model: &Model,
    update: &Update,
    cfg: &AttackConfig,
) -> Result<()> {
    step_scaled(state, model, update, cfg, 1)
}

pub(crate) fn step_scaled(
    state: &mut ReconstructionState,
    model: &Model,
    update: &Update,
    cfg: &AttackConfig,
    factor: usize,
) -> Result<()> {
    let mut tape = Tape::new();
    let x = tape.leaf(state.x_hat.clone(), true);
    let mut x_img = x;
    let mut f = factor;
    while f > 1 {
        x_img = tape.upsample2(x_img)?;
        f /= 2;
    }

    let logits_var = state.label_logits.as_ref().map(|t| tape.leaf(t.clone(), true));
    let labels = match logits_var {
        Some(lv) => LabelVars::Soft(nn::softmax_rows(&mut tape, lv)?),
        None => LabelVars::Hard(state.labels.clone()),
    };

    let candidate = match update.kind {
        UpdateKind::AggregatedGradient => candidate_fedsgd(&mut tape, model, x_img, &labels)?,
        UpdateKind::WeightDelta => {
            candidate_fedavg(&mut tape, model, x_img, &labels, &update.meta.client)?
        }
    };
    let gm = grad_match_loss(&mut tape, &candidate, update, cfg.grad_loss)?;
    let total = if cfg.tv_weight > 0.0 {
        let tv = tv_penalty(&mut tape, x_img)?;
        let weighted = tape.affine(tv, cfg.tv_weight, 0.0)?;
        tape.add(gm, weighted)?
    } else {
        gm
    };

    let mut targets = vec![x];
    if let Some(lv) = logits_var {
        targets.push(lv);
    }
    let grads = tape.backward(total, &targets)?;

    let lr = cfg.lr * cosine_lr_factor(state.iteration, cfg.iterations);
    let gx = match grads[0] {
        Some(id) => tape.value(id).clone(),
        None => Tensor::zeros(state.x_hat.shape()),
    };
    apply_descent(&mut state.x_hat, &gx, &mut state.opt_x, &cfg.optimizer, lr);
    state.x_hat = state.x_hat.clamp(0.0, 1.0);

    if let (Some(logits), Some(mom)) = (&mut state.label_logits, &mut state.opt_logits) {
        let gl = match grads[1] {
            Some(id) => tape.value(id).clone(),
            None => Tensor::zeros(logits.shape()),
        };
        apply_descent(logits, &gl, mom, &cfg.optimizer, lr);
    }

    state.last_grad_loss = tape.value(gm).data()[0];
    state.last_loss = tape.value(total).data()[0];
    if state.last_grad_loss < state.best_grad_loss {
        state.best_grad_loss = state.last_grad_loss;
    }
    state.iteration += 1;
    Ok(())
}

/// Hook fired after the iterations named in the config's `snapshot_iters`.
pub type SnapshotHook<'a> = Box<dyn FnMut(usize, &Tensor) + 'a>;
/// Hook fired after every optimization step.
pub type ProgressHook<'a> = Box<dyn FnMut(usize, &ReconstructionState) + 'a>;

/// Callbacks observed during [`run_attack`].
#[derive(Default)]
pub struct AttackHooks<'a> {
    pub on_snapshot: Option<SnapshotHook<'a>>,
    pub on_progress: Option<ProgressHook<'a>>,
}

impl AttackHooks<'_> {
    pub fn none() -> Self {
        Self::default()
    }
}

/// Runs the full attack loop and returns the final state.
pub fn run_attack(
    model: &Model,
    update: &Update,
    cfg: &AttackConfig,
    known_labels: Option<&[usize]>,
    hooks: &mut AttackHooks,
) -> Result<ReconstructionState> {
    run_scaled(model, update, cfg, known_labels, hooks, 1)
}

pub(crate) fn run_scaled(
    model: &Model,
    update: &Update,
    cfg: &AttackConfig,
    known_labels: Option<&[usize]>,
    hooks: &mut AttackHooks,
    factor: usize,
) -> Result<ReconstructionState> {
    let mut state = init_state_scaled(model, update, cfg, known_labels, factor)?;
    for t in 1..=cfg.iterations {
        step_scaled(&mut state, model, update, cfg, factor)?;
        if cfg.snapshot_iters.contains(&t) {
            if let Some(f) = &mut hooks.on_snapshot {
                f(t, &state.x_hat);
            }
        }
        if let Some(f) = &mut hooks.on_progress {
            f(t, &state);
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fed::{fedavg_update, fedsgd_update, Algorithm};
    use crate::metrics::psnr;

    fn mlp(input: Vec<usize>, hidden: usize, classes: usize, seed: u64) -> Model {
        Model::new(
            input,
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { out: hidden },
                LayerSpec::Relu,
                LayerSpec::Dense { out: classes },
            ],
            seed,
        )
        .unwrap()
    }

    fn fedsgd_client(batch: usize) -> ClientConfig {
        ClientConfig {
            algorithm: Algorithm::FedSgd,
            batch_size: batch,
            local_epochs: 1,
            lr: 0.1,
            shuffle_seed: 0,
        }
    }

    fn base_cfg(iterations: usize) -> AttackConfig {
        AttackConfig {
            iterations,
            lr: 0.1,
            optimizer: Optimizer::adam(),
            grad_loss: GradLoss::SquaredL2,
            tv_weight: 0.0,
            init: InitKind::Uniform01,
            label_mode: LabelMode::Known,
            snapshot_iters: BTreeSet::new(),
            seed: 7,
        }
    }

    #[test]
    fn zero_lr_step_leaves_state_unchanged() {
        let model = mlp(vec![1, 4, 4], 8, 3, 1);
        let mut rng = Rng::new(2);
        let batch = Tensor::uniform(&[2, 1, 4, 4], 0.0, 1.0, &mut rng);
        let update = fedsgd_update(&model, &batch, &[0, 2], &fedsgd_client(2)).unwrap();

        for opt in [Optimizer::adam(), Optimizer::Sgd] {
            let mut cfg = base_cfg(5);
            cfg.lr = 0.0;
            cfg.optimizer = opt;
            let mut state = init_state(&model, &update, &cfg, Some(&[0, 2])).unwrap();
            let before = state.x_hat.clone();
            attack_step(&mut state, &model, &update, &cfg).unwrap();
            assert_eq!(state.x_hat, before);
            assert_eq!(state.iteration, 1);
            assert!(state.last_loss.is_finite());
        }
    }

    #[test]
    fn grad_match_is_zero_on_the_true_batch() {
        let model = mlp(vec![1, 4, 4], 6, 3, 3);
        let mut rng = Rng::new(4);
        let batch = Tensor::uniform(&[2, 1, 4, 4], 0.0, 1.0, &mut rng);
        let labels = [1usize, 2];
        let update = fedsgd_update(&model, &batch, &labels, &fedsgd_client(2)).unwrap();

        let mut tape = Tape::new();
        let x = tape.leaf(batch, true);
        let cand = candidate_fedsgd(&mut tape, &model, x, &LabelVars::Hard(labels.to_vec())).unwrap();
        let l2 = grad_match_loss(&mut tape, &cand, &update, GradLoss::SquaredL2).unwrap();
        assert!(tape.value(l2).data()[0] < 1e-16);
        let cos = grad_match_loss(&mut tape, &cand, &update, GradLoss::NegativeCosine).unwrap();
        assert!(tape.value(cos).data()[0] < 1e-12);
    }

    #[test]
    fn cosine_loss_is_one_for_zero_candidate() {
        let model = mlp(vec![1, 2, 2], 4, 2, 5);
        let mut rng = Rng::new(6);
        let batch = Tensor::uniform(&[1, 1, 2, 2], 0.0, 1.0, &mut rng);
        let update = fedsgd_update(&model, &batch, &[1], &fedsgd_client(1)).unwrap();

        let mut tape = Tape::new();
        let cand: BTreeMap<String, VarId> = model
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(Tensor::zeros(v.shape()))))
            .collect();
        let cos = grad_match_loss(&mut tape, &cand, &update, GradLoss::NegativeCosine).unwrap();
        assert_eq!(tape.value(cos).data()[0], 1.0);
    }

    #[test]
    fn infer_labels_recovers_singleton_batches() {
        for seed in 0..20u64 {
            let model = mlp(vec![1, 4, 4], 10, 5, seed);
            let mut rng = Rng::new(1000 + seed);
            let batch = Tensor::uniform(&[1, 1, 4, 4], 0.0, 1.0, &mut rng);
            let label = (seed % 5) as usize;
            let update = fedsgd_update(&model, &batch, &[label], &fedsgd_client(1)).unwrap();
            assert_eq!(infer_labels(&update, &model).unwrap(), vec![label]);
        }
    }

    #[test]
    fn infer_labels_recovers_distinct_pairs() {
        let model = mlp(vec![1, 4, 4], 12, 6, 9);
        let mut rng = Rng::new(11);
        let batch = Tensor::uniform(&[2, 1, 4, 4], 0.0, 1.0, &mut rng);
        let update = fedsgd_update(&model, &batch, &[1, 4], &fedsgd_client(2)).unwrap();
        assert_eq!(infer_labels(&update, &model).unwrap(), vec![1, 4]);
    }

    #[test]
    fn infer_labels_pads_with_most_negative_classes() {
        let model = mlp(vec![1, 2, 2], 4, 4, 13);
        let mut update = fedsgd_update(
            &model,
            &Tensor::filled(&[3, 1, 2, 2], 0.5),
            &[0, 0, 0],
            &fedsgd_client(3),
        )
        .unwrap();
        // overwrite the bias gradient with a hand-built sign pattern
        update
            .tensors
            .insert("l3.b".into(), Tensor::new(vec![4], vec![-5.0, 2.0, -1.0, 3.0]).unwrap());
        assert_eq!(infer_labels(&update, &model).unwrap(), vec![0, 0, 2]);
    }

    #[test]
    fn label_inference_rejects_weight_deltas() {
        let model = mlp(vec![1, 2, 2], 4, 2, 1);
        let client = ClientConfig {
            algorithm: Algorithm::FedAvg,
            batch_size: 2,
            local_epochs: 1,
            lr: 0.1,
            shuffle_seed: 3,
        };
        let mut rng = Rng::new(8);
        let data = Tensor::uniform(&[2, 1, 2, 2], 0.0, 1.0, &mut rng);
        let update = fedavg_update(&model, &data, &[0, 1], &client).unwrap();
        assert!(infer_labels(&update, &model).is_err());
    }

    #[test]
    fn unrolled_fedavg_matches_scripted_update_values() {
        let model = mlp(vec![1, 3, 3], 6, 3, 21);
        let client = ClientConfig {
            algorithm: Algorithm::FedAvg,
            batch_size: 2,
            local_epochs: 2,
            lr: 0.05,
            shuffle_seed: 77,
        };
        let mut rng = Rng::new(22);
        let data = Tensor::uniform(&[5, 1, 3, 3], 0.0, 1.0, &mut rng);
        let labels = [0usize, 1, 2, 1, 0];
        let update = fedavg_update(&model, &data, &labels, &client).unwrap();

        let mut tape = Tape::new();
        let x = tape.leaf(data, true);
        let cand =
            candidate_fedavg(&mut tape, &model, x, &LabelVars::Hard(labels.to_vec()), &client)
                .unwrap();
        for (name, &id) in &cand {
            let got = tape.value(id);
            let want = &update.tensors[name];
            let scale = want.max_abs().max(1e-12);
            let diff = got.sub(want).unwrap().max_abs();
            assert!(diff / scale < 1e-12, "{name}: rel diff {}", diff / scale);
        }
    }

    #[test]
    fn fedavg_candidate_gradient_matches_finite_differences() {
        let model = mlp(vec![1, 2, 2], 4, 2, 31);
        let client = ClientConfig {
            algorithm: Algorithm::FedAvg,
            batch_size: 2,
            local_epochs: 2,
            lr: 0.1,
            shuffle_seed: 5,
        };
        let mut rng = Rng::new(32);
        let data = Tensor::uniform(&[3, 1, 2, 2], 0.25, 0.75, &mut rng);
        let labels = vec![0usize, 1, 0];
        let target = fedavg_update(
            &model,
            &Tensor::uniform(&[3, 1, 2, 2], 0.0, 1.0, &mut rng),
            &labels,
            &client,
        )
        .unwrap();

        let loss_at = |x: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let cand =
                candidate_fedavg(&mut tape, &model, xv, &LabelVars::Hard(labels.clone()), &client)
                    .unwrap();
            let l = grad_match_loss(&mut tape, &cand, &target, GradLoss::SquaredL2).unwrap();
            tape.value(l).data()[0]
        };

        let mut tape = Tape::new();
        let xv = tape.leaf(data.clone(), true);
        let cand =
            candidate_fedavg(&mut tape, &model, xv, &LabelVars::Hard(labels.clone()), &client)
                .unwrap();
        let l = grad_match_loss(&mut tape, &cand, &target, GradLoss::SquaredL2).unwrap();
        let grad = tape.backward(l, &[xv]).unwrap()[0].unwrap();
        let analytic = tape.value(grad).clone();

        let eps = 1e-5;
        for &i in &[0usize, 3, 7, 11] {
            let mut plus = data.clone();
            plus.data_mut()[i] += eps;
            let mut minus = data.clone();
            minus.data_mut()[i] -= eps;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
            let ana = analytic.data()[i];
            let rel = (numeric - ana).abs() / numeric.abs().max(ana.abs()).max(1e-8);
            assert!(rel < 1e-4, "coord {i}: numeric {numeric} vs analytic {ana}");
        }
    }

    #[test]
    fn snapshots_and_progress_fire_at_configured_iterations() {
        let model = mlp(vec![1, 3, 3], 4, 2, 41);
        let mut rng = Rng::new(42);
        let batch = Tensor::uniform(&[1, 1, 3, 3], 0.0, 1.0, &mut rng);
        let update = fedsgd_update(&model, &batch, &[1], &fedsgd_client(1)).unwrap();

        let mut cfg = base_cfg(6);
        cfg.snapshot_iters = [2usize, 5].into_iter().collect();
        let mut snaps: Vec<usize> = Vec::new();
        let mut progress = 0usize;
        let mut hooks = AttackHooks {
            on_snapshot: Some(Box::new(|t, x: &Tensor| {
                assert_eq!(x.shape(), &[1, 1, 3, 3]);
                snaps.push(t);
            })),
            on_progress: Some(Box::new(|_, _| progress += 1)),
        };
        run_attack(&model, &update, &cfg, Some(&[1]), &mut hooks).unwrap();
        drop(hooks);
        assert_eq!(snaps, vec![2, 5]);
        assert_eq!(progress, 6);
    }

    #[test]
    fn singleton_mlp_attack_recovers_the_image() {
        let model = mlp(vec![1, 8, 8], 32, 4, 51);
        let mut rng = Rng::new(52);
        let truth = Tensor::uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut rng);
        let update = fedsgd_update(&model, &truth, &[2], &fedsgd_client(1)).unwrap();

        let mut cfg = base_cfg(300);
        cfg.seed = 53;
        let state = run_attack(&model, &update, &cfg, Some(&[2]), &mut AttackHooks::none()).unwrap();
        let quality = psnr(&state.x_hat, &truth).unwrap();
        assert!(quality > 30.0, "psnr {quality}");
        assert!(state.best_grad_loss < 1e-6);
    }

    #[test]
    fn optimized_labels_recover_the_true_label() {
        let model = mlp(vec![1, 6, 6], 16, 5, 61);
        let mut rng = Rng::new(62);
        let truth = Tensor::uniform(&[1, 1, 6, 6], 0.0, 1.0, &mut rng);
        let update = fedsgd_update(&model, &truth, &[3], &fedsgd_client(1)).unwrap();

        let mut cfg = base_cfg(200);
        cfg.label_mode = LabelMode::Optimized;
        let state = run_attack(&model, &update, &cfg, None, &mut AttackHooks::none()).unwrap();
        let logits = state.label_logits.as_ref().unwrap();
        let row = logits.data();
        let argmax = (0..5).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(argmax, 3);
        assert!(psnr(&state.x_hat, &truth).unwrap() > 20.0);
    }

    #[test]
    fn attack_loss_decreases_from_start() {
        let model = mlp(vec![1, 5, 5], 12, 3, 71);
        let mut rng = Rng::new(72);
        let truth = Tensor::uniform(&[2, 1, 5, 5], 0.0, 1.0, &mut rng);
        let update = fedsgd_update(&model, &truth, &[0, 2], &fedsgd_client(2)).unwrap();

        let mut cfg = base_cfg(60);
        cfg.tv_weight = 1e-4;
        cfg.grad_loss = GradLoss::NegativeCosine;
        let mut state = init_state(&model, &update, &cfg, Some(&[0, 2])).unwrap();
        attack_step(&mut state, &model, &update, &cfg).unwrap();
        let first = state.last_grad_loss;
        for _ in 1..cfg.iterations {
            attack_step(&mut state, &model, &update, &cfg).unwrap();
        }
        assert!(state.last_grad_loss < first * 0.5, "{} -> {}", first, state.last_grad_loss);
        assert!(state.best_grad_loss <= state.last_grad_loss);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr_factor(0, 100), 1.0);
        let last = cosine_lr_factor(99, 100);
        assert!((last - 0.1).abs() < 1e-12);
        assert_eq!(cosine_lr_factor(0, 1), 1.0);
        let mid = cosine_lr_factor(50, 101);
        assert!((mid - 0.55).abs() < 1e-12);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = base_cfg(10);
        cfg.snapshot_iters = [11usize].into_iter().collect();
        assert!(cfg.validate().is_err());
        let mut cfg = base_cfg(10);
        cfg.lr = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = base_cfg(0);
        cfg.iterations = 0;
        assert!(cfg.validate().is_err());
    }
}
