//! Denoiser-guided inversion.
//!
//! Plain gradient-inversion reconstructions carry a characteristic
//! artefact pattern that depends on the model, the federated regime and the
//! attack itself. That pattern can be learned: the attacker attacks batches
//! of their own surrogate data, harvests intermediate reconstructions
//! paired with the known clean images, and trains a small residual denoiser
//! on those pairs. Applying the denoiser at chosen
//! iterations of a real attack (or once at the end) steers the search back
//! toward the image manifold.
//!
//! The same machinery supports a reduced-space variant: the attack runs at
//! 1/2 or 1/4 resolution and a learned upscaling denoiser maps the final
//! latent to full resolution.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, AttackHooks, ReconstructionState};
use crate::checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fed::{self, ClientConfig, DefenseConfig, Update};
use crate::metrics::psnr;
use crate::nn::{LayerSpec, Model};
use crate::par::Threads;
use crate::rng;
use crate::tensor::Tensor;
use crate::train::{self, FitConfig, FitReport, FitTarget};

/// Noisy/clean training material for the denoiser. `noisy` holds attack
/// snapshots at latent resolution, `clean` the corresponding true images;
/// pair `p` is `noisy[p]` vs `clean[p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    /// [P, C, H/scale, W/scale]
    pub noisy: Tensor,
    /// [P, C, H, W]
    pub clean: Tensor,
    /// Snapshot iteration each pair was harvested at.
    pub stages: Vec<usize>,
    /// Index of the surrogate unit each pair came from.
    pub origin: Vec<usize>,
    pub scale: usize,
}

impl PairSet {
    pub fn new(
        noisy: Tensor,
        clean: Tensor,
        stages: Vec<usize>,
        origin: Vec<usize>,
        scale: usize,
    ) -> Result<PairSet> {
        if noisy.shape().len() != 4 || clean.shape().len() != 4 {
            return Err(Error::invalid("pair sets hold [P,C,H,W] tensors"));
        }
        let p = noisy.shape()[0];
        if clean.shape()[0] != p || stages.len() != p || origin.len() != p {
            return Err(Error::invalid("pair set components disagree on length"));
        }
        if !matches!(scale, 1 | 2 | 4) {
            return Err(Error::invalid("pair set scale must be 1, 2 or 4"));
        }
        let want: Vec<usize> = vec![
            p,
            noisy.shape()[1],
            noisy.shape()[2] * scale,
            noisy.shape()[3] * scale,
        ];
        if clean.shape() != want {
            return Err(Error::shape("pair set clean images", &want, clean.shape()));
        }
        Ok(PairSet {
            noisy,
            clean,
            stages,
            origin,
            scale,
        })
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Concatenates two pair sets collected at the same geometry.
    pub fn merge(&self, other: &PairSet) -> Result<PairSet> {
        if self.scale != other.scale {
            return Err(Error::invalid("cannot merge pair sets with different scales"));
        }
        if self.noisy.shape()[1..] != other.noisy.shape()[1..] {
            return Err(Error::shape(
                "merge noisy",
                &self.noisy.shape()[1..],
                &other.noisy.shape()[1..],
            ));
        }
        let cat = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
            let mut shape = a.shape().to_vec();
            shape[0] += b.shape()[0];
            let mut data = a.data().to_vec();
            data.extend_from_slice(b.data());
            Tensor::new(shape, data)
        };
        let mut stages = self.stages.clone();
        stages.extend_from_slice(&other.stages);
        let mut origin = self.origin.clone();
        origin.extend_from_slice(&other.origin);
        PairSet::new(cat(&self.noisy, &other.noisy)?, cat(&self.clean, &other.clean)?, stages, origin, self.scale)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "kind": "pairs",
            "stages": self.stages,
            "origin": self.origin,
            "scale": self.scale,
        });
        let mut tensors = BTreeMap::new();
        tensors.insert("noisy".to_string(), self.noisy.clone());
        tensors.insert("clean".to_string(), self.clean.clone());
        checkpoint::save_tensors(path, &header, &tensors)
    }

    pub fn load(path: &Path) -> Result<PairSet> {
        let (header, mut tensors) = checkpoint::load_tensors(path)?;
        let bad = |m: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        if header.get("kind").and_then(|v| v.as_str()) != Some("pairs") {
            return Err(bad("not a pair-set checkpoint"));
        }
        let list = |key: &str| -> Result<Vec<usize>> {
            header
                .get(key)
                .and_then(|v| v.as_array())
                .ok_or_else(|| bad(&format!("missing {key}")))?
                .iter()
                .map(|v| v.as_u64().map(|u| u as usize).ok_or_else(|| bad(&format!("bad {key} entry"))))
                .collect()
        };
        let stages = list("stages")?;
        let origin = list("origin")?;
        let scale = header
            .get("scale")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| bad("missing scale"))? as usize;
        let noisy = tensors.remove("noisy").ok_or_else(|| bad("missing noisy tensor"))?;
        let clean = tensors.remove("clean").ok_or_else(|| bad("missing clean tensor"))?;
        PairSet::new(noisy, clean, stages, origin, scale)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectConfig {
    /// Attack iterations at which reconstructions are harvested.
    pub snapshot_iters: BTreeSet<usize>,
    /// Total number of pairs wanted; collection truncates to this.
    pub pairs: usize,
    /// Latent resolution factor of the surrogate attacks.
    pub scale: usize,
    /// Base seed; unit `i` attacks with seed derive(seed, i).
    pub seed: u64,
}

impl CollectConfig {
    fn validate(&self, attack_cfg: &AttackConfig) -> Result<()> {
        if self.pairs == 0 {
            return Err(Error::invalid("pair target must be positive"));
        }
        if self.snapshot_iters.is_empty() {
            return Err(Error::invalid("collection needs at least one snapshot iteration"));
        }
        for &s in &self.snapshot_iters {
            if s == 0 || s > attack_cfg.iterations {
                return Err(Error::invalid(format!(
                    "snapshot iteration {s} outside 1..={}",
                    attack_cfg.iterations
                )));
            }
        }
        if !matches!(self.scale, 1 | 2 | 4) {
            return Err(Error::invalid("collection scale must be 1, 2 or 4"));
        }
        Ok(())
    }
}

/// Carves `count` consecutive disjoint units of `unit` samples from a
/// dataset (for FedSGD a unit is one batch; for FedAVG one client's local
/// dataset).
pub fn carve_units(ds: &Dataset, unit: usize, count: usize) -> Result<Vec<(Tensor, Vec<usize>)>> {
    (0..count).map(|i| ds.slice(i * unit, unit)).collect()
}

/// Attacks every surrogate unit and harvests (reconstruction, clean) pairs
/// at the configured snapshot iterations, pairing by batch index. Units run
/// independently (and in parallel); unit `i` uses attack seed
/// `derive(cc.seed, i)` and defense round `i`, so the output is identical
/// for every thread count.
pub fn collect_pairs(
    global: &Model,
    units: &[(Tensor, Vec<usize>)],
    client: &ClientConfig,
    defense: Option<&DefenseConfig>,
    attack_cfg: &AttackConfig,
    cc: &CollectConfig,
    threads: &Threads,
) -> Result<PairSet> {
    cc.validate(attack_cfg)?;
    if units.is_empty() {
        return Err(Error::invalid("no surrogate units supplied"));
    }

    let per_unit: usize = units
        .iter()
        .map(|(t, _)| t.shape()[0] * cc.snapshot_iters.len())
        .sum();
    if per_unit < cc.pairs {
        return Err(Error::invalid(format!(
            "{} units yield at most {per_unit} pairs, {} requested",
            units.len(),
            cc.pairs
        )));
    }

    let harvested: Vec<(Vec<Tensor>, Vec<usize>)> = threads.try_map(units.len(), |i| {
        let (images, labels) = &units[i];
        let mut update = match client.algorithm {
            fed::Algorithm::FedSgd => fed::fedsgd_update(global, images, labels, client)?,
            fed::Algorithm::FedAvg => fed::fedavg_update(global, images, labels, client)?,
        };
        if let Some(d) = defense {
            update = fed::apply_defense(&update, d, i as u64)?;
        }
        let mut cfg = attack_cfg.clone();
        cfg.snapshot_iters = cc.snapshot_iters.clone();
        cfg.seed = rng::derive(cc.seed, i as u64);

        // one [B,C,h,w] block per snapshot iteration
        let mut snaps: Vec<Tensor> = Vec::with_capacity(cc.snapshot_iters.len());
        let mut snap_stages: Vec<usize> = Vec::new();
        {
            let mut hooks = AttackHooks {
                on_snapshot: Some(Box::new(|stage, x: &Tensor| {
                    snaps.push(x.clone());
                    snap_stages.push(stage);
                })),
                on_progress: None,
            };
            attack::run_scaled(global, &update, &cfg, Some(labels), &mut hooks, cc.scale)?;
        }
        Ok::<_, Error>((snaps, snap_stages))
    })?;

    let mut noisy_rows: Vec<Tensor> = Vec::new();
    let mut clean_rows: Vec<Tensor> = Vec::new();
    let mut stages = Vec::new();
    let mut origin = Vec::new();
    'outer: for (i, (snaps, snap_stages)) in harvested.iter().enumerate() {
        let (images, _) = &units[i];
        let b = images.shape()[0];
        let latent_dims = snaps[0].shape()[1..].to_vec();
        let clean_dims = images.shape()[1..].to_vec();
        for (&stage, block) in snap_stages.iter().zip(snaps) {
            for j in 0..b {
                noisy_rows.push(block.row(j)?.reshape(&latent_dims)?);
                clean_rows.push(images.row(j)?.reshape(&clean_dims)?);
                stages.push(stage);
                origin.push(i);
                if stages.len() == cc.pairs {
                    break 'outer;
                }
            }
        }
    }

    PairSet::new(
        Tensor::stack(&noisy_rows)?,
        Tensor::stack(&clean_rows)?,
        stages,
        origin,
        cc.scale,
    )
}

/// Builds the denoiser architecture: optional nearest-neighbour upsampling
/// to full resolution, then a residual stack of 3x3 convolutions. The final
/// convolution is zero-initialised, so an untrained denoiser is exactly the
/// identity (or plain upscaling when scale > 1).
pub fn denoiser_model(
    channels: usize,
    latent_h: usize,
    latent_w: usize,
    scale: usize,
    features: usize,
    depth: usize,
    seed: u64,
) -> Result<Model> {
    if !matches!(scale, 1 | 2 | 4) {
        return Err(Error::invalid("denoiser scale must be 1, 2 or 4"));
    }
    if features == 0 || depth == 0 {
        return Err(Error::invalid("denoiser needs features >= 1 and depth >= 1"));
    }
    let mut layers = Vec::new();
    let mut s = scale;
    while s > 1 {
        layers.push(LayerSpec::Upsample2);
        s /= 2;
    }
    let mut body = vec![LayerSpec::Conv2d { out: features }, LayerSpec::Relu];
    for _ in 1..depth {
        body.push(LayerSpec::Conv2d { out: features });
        body.push(LayerSpec::Relu);
    }
    body.push(LayerSpec::Conv2d { out: channels });
    let final_conv = body.len() - 1;
    let residual_index = layers.len();
    layers.push(LayerSpec::Residual { body });

    let model = Model::new(vec![channels, latent_h, latent_w], layers, seed)?;
    let mut params = model.params.clone();
    let wname = format!("l{residual_index}.{final_conv}.w");
    let zero = Tensor::zeros(params[&wname].shape());
    params.insert(wname, zero);
    model.replace_params(params)
}

/// A convex blend of denoisers sharing one geometry. Applying it clamps to
/// the image box.
#[derive(Clone, Debug)]
pub struct BlendedDenoiser {
    models: Vec<Model>,
    weights: Vec<f64>,
    scale: usize,
}

impl BlendedDenoiser {
    pub fn new(models: Vec<Model>, weights: Vec<f64>) -> Result<BlendedDenoiser> {
        if models.is_empty() || models.len() != weights.len() {
            return Err(Error::invalid("need one weight per denoiser"));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "blend weights must be non-negative and sum to 1, got sum {total}"
            )));
        }
        let in_shape = models[0].input_shape.clone();
        let out_shape = models[0].output_shape()?;
        for m in &models[1..] {
            if m.input_shape != in_shape || m.output_shape()? != out_shape {
                return Err(Error::invalid("blended denoisers must share input/output shapes"));
            }
        }
        if in_shape.len() != 3 || out_shape.len() != 3 {
            return Err(Error::invalid("denoisers map [C,h,w] to [C,H,W]"));
        }
        let (h, hh) = (in_shape[1], out_shape[1]);
        if hh % h != 0 || !matches!(hh / h, 1 | 2 | 4) {
            return Err(Error::invalid("denoiser output must be 1x, 2x or 4x its input"));
        }
        Ok(BlendedDenoiser {
            scale: hh / h,
            models,
            weights,
        })
    }

    pub fn single(model: Model) -> Result<BlendedDenoiser> {
        BlendedDenoiser::new(vec![model], vec![1.0])
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.models[0].input_shape
    }

    /// Denoises a batch [B,C,h,w] -> [B,C,H,W], clamped to [0,1].
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for (model, &w) in self.models.iter().zip(&self.weights) {
            let y = model.forward(x)?;
            let wy = y.scale(w);
            acc = Some(match acc {
                Some(a) => a.add(&wy)?,
                None => wy,
            });
        }
        Ok(acc.expect("at least one model").clamp(0.0, 1.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Convolution width of the residual body.
    pub features: usize,
    /// Number of conv+relu blocks before the final projection.
    pub depth: usize,
    /// Parameter init seed.
    pub seed: u64,
    pub fit: FitConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserReport {
    pub train_pairs: usize,
    pub held_out_pairs: usize,
    /// Mean PSNR of the raw inputs (upscaled if needed) against clean
    /// held-out images.
    pub psnr_before: f64,
    /// Mean PSNR of denoised held-out inputs against clean images.
    pub psnr_after: f64,
    pub fit: FitReport,
}

/// Splits pair indices into train/held-out, stratified by stage: within each
/// stage the first 4/5 (by collection order, at least one) train. If that
/// leaves nothing held out, the last pair overall is moved to the held-out
/// side.
fn split_pairs(stages: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut by_stage: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &s) in stages.iter().enumerate() {
        by_stage.entry(s).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut held = Vec::new();
    for idxs in by_stage.values() {
        let tk = (idxs.len() * 4 / 5).max(1);
        train.extend_from_slice(&idxs[..tk]);
        held.extend_from_slice(&idxs[tk..]);
    }
    if held.is_empty() && train.len() >= 2 {
        let last_pos = train
            .iter()
            .enumerate()
            .max_by_key(|(_, &v)| v)
            .map(|(p, _)| p)
            .expect("non-empty");
        held.push(train.remove(last_pos));
    }
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}

/// Trains a fresh denoiser on a pair set and reports held-out quality.
pub fn train_denoiser(
    pairs: &PairSet,
    cfg: &DenoiserConfig,
    threads: &Threads,
) -> Result<(Model, DenoiserReport)> {
    if pairs.len() < 2 {
        return Err(Error::invalid("denoiser training needs at least 2 pairs"));
    }
    let (c, h, w) = (
        pairs.noisy.shape()[1],
        pairs.noisy.shape()[2],
        pairs.noisy.shape()[3],
    );
    let model = denoiser_model(c, h, w, pairs.scale, cfg.features, cfg.depth, cfg.seed)?;

    let (train_idx, held_idx) = split_pairs(&pairs.stages);
    let x_train = pairs.noisy.take_rows(&train_idx)?;
    let y_train = pairs.clean.take_rows(&train_idx)?;
    let (trained, fit_report) = train::fit(
        &model,
        &x_train,
        &FitTarget::Tensors(&y_train),
        &cfg.fit,
        threads,
        |_| {},
    )?;

    let x_held = pairs.noisy.take_rows(&held_idx)?;
    let y_held = pairs.clean.take_rows(&held_idx)?;
    let raw = if pairs.scale > 1 {
        x_held.upsample_nearest(pairs.scale)?
    } else {
        x_held.clone()
    };
    let denoised = BlendedDenoiser::single(trained.clone())?.apply(&x_held)?;
    let image_shape = &pairs.clean.shape()[1..];
    let mut before = 0.0;
    let mut after = 0.0;
    for (k, _) in held_idx.iter().enumerate() {
        let clean = y_held.row(k)?.reshape(image_shape)?;
        before += psnr(&raw.row(k)?.reshape(image_shape)?, &clean)?;
        after += psnr(&denoised.row(k)?.reshape(image_shape)?, &clean)?;
    }
    let n = held_idx.len() as f64;
    let report = DenoiserReport {
        train_pairs: train_idx.len(),
        held_out_pairs: held_idx.len(),
        psnr_before: before / n,
        psnr_after: after / n,
        fit: fit_report,
    };
    Ok((trained, report))
}

/// Denoiser-guided attack. Runs the plain attack loop at the denoiser's
/// latent scale and applies the denoiser after each iteration in
/// `denoise_iters`. A replacement that changes nothing (bitwise) is skipped;
/// otherwise optimizer moments are reset, since the old moments describe a
/// different trajectory.
///
/// With an upscaling denoiser (scale > 1) the only legal denoise iteration
/// is the final one: the replacement changes resolution, after which no
/// further latent step is possible.
pub fn guide_reconstruct(
    model: &Model,
    update: &Update,
    attack_cfg: &AttackConfig,
    denoiser: &BlendedDenoiser,
    denoise_iters: &BTreeSet<usize>,
    known_labels: Option<&[usize]>,
    hooks: &mut AttackHooks,
) -> Result<ReconstructionState> {
    if denoise_iters.is_empty() {
        return Err(Error::invalid("guided attack needs at least one denoise iteration"));
    }
    for &d in denoise_iters {
        if d == 0 || d > attack_cfg.iterations {
            return Err(Error::invalid(format!(
                "denoise iteration {d} outside 1..={}",
                attack_cfg.iterations
            )));
        }
    }
    let scale = denoiser.scale();
    if scale > 1 && *denoise_iters != BTreeSet::from([attack_cfg.iterations]) {
        return Err(Error::invalid(
            "an upscaling denoiser can only be applied at the final iteration",
        ));
    }
    if model.input_shape.len() != 3 {
        return Err(Error::invalid("attacks expect [C,H,W] model inputs"));
    }
    let want_latent = [
        model.input_shape[0],
        model.input_shape[1] / scale,
        model.input_shape[2] / scale,
    ];
    if denoiser.input_shape() != want_latent.as_slice() {
        return Err(Error::shape(
            "denoiser input",
            &want_latent,
            denoiser.input_shape(),
        ));
    }

    let mut state = attack::init_state_scaled(model, update, attack_cfg, known_labels, scale)?;
    for t in 1..=attack_cfg.iterations {
        attack::step_scaled(&mut state, model, update, attack_cfg, scale)?;
        if denoise_iters.contains(&t) {
            let replaced = denoiser.apply(&state.x_hat)?;
            if replaced != state.x_hat {
                state.x_hat = replaced;
                state.reset_moments();
            }
        }
        if attack_cfg.snapshot_iters.contains(&t) {
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
