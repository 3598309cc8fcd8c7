//! A small shared training loop. The probe classifier trains with
//! cross-entropy against integer labels; the denoiser trains with mean
//! absolute error against target images. Everything else (shuffling,
//! minibatching, the optimizer, divergence detection, parallel gradient
//! accumulation) is common.
//!
//! Gradients are accumulated over fixed-size chunks of the minibatch and the
//! chunk sums are folded in ascending order, so results are bitwise
//! identical for every thread count (and for the sequential build).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attack::{apply_descent, Moments, Optimizer};
use crate::error::{Error, Result};
use crate::nn::{self, Model, Reduction};
use crate::par::Threads;
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Chunk granularity for gradient accumulation. Fixed (not derived from the
/// thread count) so the floating-point fold order never changes.
const GRAD_CHUNK: usize = 8;

pub enum FitTarget<'a> {
    /// Cross-entropy against integer labels, one per input row.
    Labels(&'a [usize]),
    /// Mean absolute error against target tensors, stacked like the inputs.
    Tensors(&'a Tensor),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub shuffle_seed: u64,
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("fit epochs and batch_size must be positive"));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::invalid("fit lr must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Training loss averaged per sample (and per element for tensor
    /// targets) over the epoch.
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: Vec<EpochStats>,
    pub final_mean_loss: f64,
}

/// Sum-reduced loss and parameter gradients for a subset of rows.
fn chunk_grads(
    model: &Model,
    inputs: &Tensor,
    target: &FitTarget,
    rows: &[usize],
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let x = inputs.take_rows(rows)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x, false);
    let params = model.insert_params(&mut tape, true);
    let graph = nn::build_graph(&mut tape, model, xv, &params)?;
    let loss = match target {
        FitTarget::Labels(all) => {
            let lb: Vec<usize> = rows.iter().map(|&i| all[i]).collect();
            nn::cross_entropy(&mut tape, graph.output, &lb, Reduction::Sum)?
        }
        FitTarget::Tensors(t) => {
            let tb = tape.constant(t.take_rows(rows)?);
            let d = tape.sub(graph.output, tb)?;
            let a = tape.abs(d)?;
            tape.sum_all(a)?
        }
    };
    let names: Vec<String> = params.keys().cloned().collect();
    let vars: Vec<_> = params.values().copied().collect();
    let grads = tape.backward(loss, &vars)?;
    let mut out = BTreeMap::new();
    for (name, grad) in names.into_iter().zip(grads) {
        let g = match grad {
            Some(id) => tape.value(id).clone(),
            None => Tensor::zeros(model.params[&name].shape()),
        };
        out.insert(name, g);
    }
    Ok((tape.value(loss).data()[0], out))
}

fn minibatch_grads(
    model: &Model,
    inputs: &Tensor,
    target: &FitTarget,
    batch_rows: &[usize],
    threads: &Threads,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let chunks: Vec<Vec<usize>> = batch_rows.chunks(GRAD_CHUNK).map(<[usize]>::to_vec).collect();
    let partials = threads.try_map(chunks.len(), |i| chunk_grads(model, inputs, target, &chunks[i]))?;
    let mut iter = partials.into_iter();
    let (mut loss, mut grads) = iter.next().expect("at least one chunk");
    for (l, g) in iter {
        loss += l;
        for (name, part) in g {
            let acc = grads.get_mut(&name).expect("same parameter set");
            *acc = acc.add(&part)?;
        }
    }
    Ok((loss, grads))
}

/// Trains a copy of `model` on `inputs` against `target`. `on_epoch` fires
/// after every epoch with that epoch's mean loss.
///
/// If a step produces a non-finite loss, gradient, activation or parameter,
/// training stops with [`Error::Diverged`] carrying the parameters from just
/// before that step (always finite).
pub fn fit(
    model: &Model,
    inputs: &Tensor,
    target: &FitTarget,
    cfg: &FitConfig,
    threads: &Threads,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(Model, FitReport)> {
    cfg.validate()?;
    let n = inputs.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::invalid("fit needs a non-empty dataset"));
    }
    match target {
        FitTarget::Labels(l) => {
            if l.len() != n {
                return Err(Error::invalid(format!("{} labels for {n} inputs", l.len())));
            }
            let classes = model.num_classes()?;
            for &label in *l {
                if label >= classes {
                    return Err(Error::LabelOutOfRange { label, classes });
                }
            }
        }
        FitTarget::Tensors(t) => {
            let mut want = vec![n];
            want.extend_from_slice(&model.output_shape()?);
            if t.shape() != want {
                return Err(Error::shape("fit targets", &want, t.shape()));
            }
        }
    }
    // per-sample loss normaliser: elements per sample for regression, 1 for
    // classification
    let per_sample: f64 = match target {
        FitTarget::Labels(_) => 1.0,
        FitTarget::Tensors(t) => (t.numel() / n) as f64,
    };

    let mut current = model.clone();
    let mut moments: BTreeMap<String, Moments> = current
        .params
        .iter()
        .map(|(k, v)| (k.clone(), Moments::zeros(v.shape())))
        .collect();
    let mut rng = Rng::new(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    let mut report = FitReport {
        epochs: Vec::with_capacity(cfg.epochs),
        final_mean_loss: f64::NAN,
    };

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch_rows in order.chunks(cfg.batch_size) {
            let entering = current.params.clone();
            let diverged = |step: usize, params: BTreeMap<String, Tensor>| Error::Diverged {
                step,
                last_good: Box::new(params),
            };
            let (loss_sum, grads) =
                match minibatch_grads(&current, inputs, target, batch_rows, threads) {
                    Ok(v) => v,
                    Err(Error::Layer { .. }) | Err(Error::NonFinite { .. }) => {
                        return Err(diverged(step, entering))
                    }
                    Err(e) => return Err(e),
                };
            let norm = batch_rows.len() as f64 * per_sample;
            if !loss_sum.is_finite() || grads.values().any(|g| !g.is_finite()) {
                return Err(diverged(step, entering));
            }

            let mut params = current.params.clone();
            for (name, tensor) in params.iter_mut() {
                let g = grads[name].scale(1.0 / norm);
                let mom = moments.get_mut(name).expect("moment per parameter");
                apply_descent(tensor, &g, mom, &cfg.optimizer, cfg.lr);
                if !tensor.is_finite() {
                    return Err(diverged(step, entering));
                }
            }
            current = current.replace_params(params)?;
            epoch_loss += loss_sum / per_sample;
            step += 1;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: epoch_loss / n as f64,
        };
        on_epoch(&stats);
        report.epochs.push(stats);
        report.final_mean_loss = stats.mean_loss;
    }
    Ok((current, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;

    fn blobs(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = Rng::new(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let class = i % 2;
            let base = if class == 0 { 0.2 } else { 0.8 };
            let img = Tensor::normal(&[1, 4, 4], base, 0.05, &mut rng).clamp(0.0, 1.0);
            images.push(img);
            labels.push(class);
        }
        (Tensor::stack(&images).unwrap(), labels)
    }

    fn probe_model(seed: u64) -> Model {
        Model::new(
            vec![1, 4, 4],
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { out: 8 },
                LayerSpec::Relu,
                LayerSpec::Dense { out: 2 },
            ],
            seed,
        )
        .unwrap()
    }

    fn fit_cfg(epochs: usize) -> FitConfig {
        FitConfig {
            epochs,
            batch_size: 10,
            lr: 0.05,
            optimizer: Optimizer::adam(),
            shuffle_seed: 99,
        }
    }

    #[test]
    fn classifier_fit_reaches_high_accuracy() {
        let (images, labels) = blobs(40, 1);
        let model = probe_model(2);
        let before = model.accuracy(&images, &labels).unwrap();
        let (trained, report) = fit(
            &model,
            &images,
            &FitTarget::Labels(&labels),
            &fit_cfg(15),
            &Threads::one(),
            |_| {},
        )
        .unwrap();
        let after = trained.accuracy(&images, &labels).unwrap();
        assert!(after >= 0.95, "accuracy {before} -> {after}");
        assert!(report.final_mean_loss < report.epochs[0].mean_loss);
        assert_eq!(report.epochs.len(), 15);
    }

    #[test]
    fn regression_fit_reduces_reconstruction_error() {
        let mut rng = Rng::new(3);
        let clean = Tensor::uniform(&[12, 1, 6, 6], 0.0, 1.0, &mut rng);
        let noise = Tensor::normal(&[12, 1, 6, 6], 0.0, 0.2, &mut rng);
        let noisy = clean.add(&noise).unwrap().clamp(0.0, 1.0);
        let model = Model::new(
            vec![1, 6, 6],
            vec![
                LayerSpec::Conv2d { out: 4 },
                LayerSpec::Relu,
                LayerSpec::Conv2d { out: 1 },
            ],
            4,
        )
        .unwrap();
        let mut cfg = fit_cfg(20);
        cfg.batch_size = 4;
        cfg.lr = 0.01;
        let (_, report) = fit(
            &model,
            &noisy,
            &FitTarget::Tensors(&clean),
            &cfg,
            &Threads::one(),
            |_| {},
        )
        .unwrap();
        assert!(
            report.final_mean_loss < 0.5 * report.epochs[0].mean_loss,
            "{} -> {}",
            report.epochs[0].mean_loss,
            report.final_mean_loss
        );
    }

    #[test]
    fn fit_is_bitwise_reproducible_and_thread_invariant() {
        let (images, labels) = blobs(20, 5);
        let model = probe_model(6);
        let target = FitTarget::Labels(&labels);
        let cfg = fit_cfg(3);
        let (a, ra) = fit(&model, &images, &target, &cfg, &Threads::one(), |_| {}).unwrap();
        let (b, rb) = fit(&model, &images, &target, &cfg, &Threads::one(), |_| {}).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(ra, rb);
        let (c, rc) = fit(&model, &images, &target, &cfg, &Threads::new(2), |_| {}).unwrap();
        assert_eq!(a.params, c.params);
        assert_eq!(ra, rc);
    }

    #[test]
    fn divergence_reports_last_finite_parameters() {
        let (images, labels) = blobs(8, 7);
        let model = probe_model(8);
        // lr at the f64 overflow boundary: either the update itself or the
        // next forward pass goes non-finite
        let mut cfg = fit_cfg(10);
        cfg.optimizer = Optimizer::Sgd;
        cfg.lr = 1e308;
        cfg.batch_size = 4;
        let err = fit(
            &model,
            &images,
            &FitTarget::Labels(&labels),
            &cfg,
            &Threads::one(),
            |_| {},
        )
        .unwrap_err();
        match err {
            Error::Diverged { step, last_good } => {
                assert!(step < 20);
                assert!(last_good.values().all(Tensor::is_finite));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn epoch_callback_observes_every_epoch() {
        let (images, labels) = blobs(10, 9);
        let model = probe_model(10);
        let mut seen = Vec::new();
        fit(
            &model,
            &images,
            &FitTarget::Labels(&labels),
            &fit_cfg(4),
            &Threads::one(),
            |s| seen.push(s.epoch),
        )
        .unwrap();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fit_validates_inputs() {
        let (images, labels) = blobs(10, 11);
        let model = probe_model(12);
        let bad_labels = vec![0usize; 9];
        assert!(fit(
            &model,
            &images,
            &FitTarget::Labels(&bad_labels),
            &fit_cfg(1),
            &Threads::one(),
            |_| {},
        )
        .is_err());
        let bad_targets = Tensor::zeros(&[10, 3]);
        assert!(fit(
            &model,
            &images,
            &FitTarget::Tensors(&bad_targets),
            &fit_cfg(1),
            &Threads::one(),
            |_| {},
        )
        .is_err());
        let _ = labels;
    }
}
