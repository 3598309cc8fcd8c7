//! Model definition and the graph builders shared by training and attacks.
//!
//! A [`Model`] is a layer list plus a parameter map; applying it to a batch
//! appends ops to a [`Tape`]. The builder takes parameter *variables* rather
//! than tensors, which is what lets the attack unroll local training: each
//! unrolled step feeds the previous step's parameter nodes back in, and the
//! whole trajectory stays differentiable.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Layer vocabulary. Convolutions are 3x3, stride 1, same padding; pooling is
/// 2x2 average; `Residual` adds its body's output to its input and requires a
/// shape-preserving body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { out: usize },
    Conv2d { out: usize },
    Relu,
    AvgPool2,
    Flatten,
    Upsample2,
    Residual { body: Vec<LayerSpec> },
}

#[derive(Clone, Debug)]
pub struct Model {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub params: BTreeMap<String, Tensor>,
}

/// Weight tensor metadata produced by walking a layer stack: name, shape and
/// the fan-in used for init scaling.
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
}

fn walk_layers(
    layers: &[LayerSpec],
    input_shape: &[usize],
    prefix: &str,
    out: &mut Vec<ParamSpec>,
) -> Result<Vec<usize>> {
    let mut shape = input_shape.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        let name = if prefix.is_empty() {
            format!("l{i}")
        } else {
            format!("{prefix}.{i}")
        };
        let err = |msg: String| Error::Layer {
            index: i,
            kind: format!("{layer:?}"),
            message: msg,
        };
        match layer {
            LayerSpec::Dense { out: o } => {
                if shape.len() != 1 {
                    return Err(err(format!("dense needs flat input, got {shape:?}")));
                }
                if *o == 0 {
                    return Err(err("dense output must be positive".into()));
                }
                out.push(ParamSpec {
                    name: format!("{name}.w"),
                    shape: vec![shape[0], *o],
                    fan_in: shape[0],
                });
                out.push(ParamSpec {
                    name: format!("{name}.b"),
                    shape: vec![*o],
                    fan_in: 0,
                });
                shape = vec![*o];
            }
            LayerSpec::Conv2d { out: o } => {
                if shape.len() != 3 {
                    return Err(err(format!("conv2d needs [C,H,W] input, got {shape:?}")));
                }
                if *o == 0 {
                    return Err(err("conv2d output channels must be positive".into()));
                }
                out.push(ParamSpec {
                    name: format!("{name}.w"),
                    shape: vec![*o, shape[0], 3, 3],
                    fan_in: shape[0] * 9,
                });
                out.push(ParamSpec {
                    name: format!("{name}.b"),
                    shape: vec![*o],
                    fan_in: 0,
                });
                shape = vec![*o, shape[1], shape[2]];
            }
            LayerSpec::Relu => {}
            LayerSpec::AvgPool2 => {
                if shape.len() != 3 || !shape[1].is_multiple_of(2) || !shape[2].is_multiple_of(2) {
                    return Err(err(format!("avg_pool2 needs even [C,H,W], got {shape:?}")));
                }
                shape = vec![shape[0], shape[1] / 2, shape[2] / 2];
            }
            LayerSpec::Flatten => {
                let n: usize = shape.iter().product();
                shape = vec![n];
            }
            LayerSpec::Upsample2 => {
                if shape.len() != 3 {
                    return Err(err(format!("upsample2 needs [C,H,W], got {shape:?}")));
                }
                shape = vec![shape[0], shape[1] * 2, shape[2] * 2];
            }
            LayerSpec::Residual { body } => {
                let body_out = walk_layers(body, &shape, &name, out)?;
                if body_out != shape {
                    return Err(err(format!(
                        "residual body changes shape {shape:?} -> {body_out:?}"
                    )));
                }
            }
        }
    }
    Ok(shape)
}

impl Model {
    /// Builds a model with He-uniform weights and zero biases, drawn in layer
    /// order from a single seeded stream.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, seed: u64) -> Result<Model> {
        let mut specs = Vec::new();
        walk_layers(&layers, &input_shape, "", &mut specs)?;
        let mut rng = Rng::new(seed);
        let mut params = BTreeMap::new();
        for spec in &specs {
            let t = if spec.fan_in == 0 {
                Tensor::zeros(&spec.shape)
            } else {
                let bound = (6.0 / spec.fan_in as f64).sqrt();
                Tensor::uniform(&spec.shape, -bound, bound, &mut rng)
            };
            params.insert(spec.name.clone(), t);
        }
        Ok(Model {
            input_shape,
            layers,
            params,
        })
    }

    /// Builds a model from existing parameters, validating names and shapes
    /// against the layer stack.
    pub fn with_params(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        params: BTreeMap<String, Tensor>,
    ) -> Result<Model> {
        let mut specs = Vec::new();
        walk_layers(&layers, &input_shape, "", &mut specs)?;
        if specs.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            let t = params
                .get(&spec.name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::shape(
                    format!("parameter {}", spec.name),
                    &spec.shape,
                    t.shape(),
                ));
            }
        }
        Ok(Model {
            input_shape,
            layers,
            params,
        })
    }

    /// Per-sample output shape of the layer stack.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let mut specs = Vec::new();
        walk_layers(&self.layers, &self.input_shape, "", &mut specs)
    }

    /// Number of classes for classifier models (flat output).
    pub fn num_classes(&self) -> Result<usize> {
        let out = self.output_shape()?;
        if out.len() != 1 {
            return Err(Error::invalid(format!(
                "classifier output must be flat, got {out:?}"
            )));
        }
        Ok(out[0])
    }

    /// Replaces the parameter map after shape validation.
    pub fn replace_params(&self, params: BTreeMap<String, Tensor>) -> Result<Model> {
        Model::with_params(self.input_shape.clone(), self.layers.clone(), params)
    }

    /// Inserts every parameter as a tape leaf, in map (lexicographic) order.
    pub fn insert_params(&self, tape: &mut Tape, requires_grad: bool) -> BTreeMap<String, VarId> {
        self.params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), requires_grad)))
            .collect()
    }

    /// Plain forward pass; returns output values.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let input = tape.constant(batch.clone());
        let params = self.insert_params(&mut tape, false);
        let graph = build_graph(&mut tape, self, input, &params)?;
        Ok(tape.value(graph.output).clone())
    }

    /// Penultimate activations (input to the final dense layer), used as the
    /// embedding for the proxy perceptual metric.
    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let input = tape.constant(batch.clone());
        let params = self.insert_params(&mut tape, false);
        let graph = build_graph(&mut tape, self, input, &params)?;
        Ok(tape.value(graph.penultimate).clone())
    }

    /// Fraction of batch items whose argmax logit matches the label.
    pub fn accuracy(&self, batch: &Tensor, labels: &[usize]) -> Result<f64> {
        let logits = self.forward(batch)?;
        let b = logits.shape()[0];
        let k = logits.shape()[1];
        if labels.len() != b {
            return Err(Error::invalid(format!(
                "{} labels for batch of {b}",
                labels.len()
            )));
        }
        let mut hits = 0usize;
        for (i, &label) in labels.iter().enumerate() {
            let row = &logits.data()[i * k..(i + 1) * k];
            let mut best = 0usize;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == label {
                hits += 1;
            }
        }
        Ok(hits as f64 / b as f64)
    }
}

pub struct GraphOut {
    pub output: VarId,
    pub penultimate: VarId,
    /// Pre-activation inputs of every relu, exposed so finite-difference
    /// checks can detect kink crossings.
    pub relu_inputs: Vec<VarId>,
}

/// Appends the model's forward computation for `input` (shape [B, ...]) to
/// the tape, reading parameters from `params`. Checks every layer output for
/// non-finite values and reports the offending layer.
pub fn build_graph(
    tape: &mut Tape,
    model: &Model,
    input: VarId,
    params: &BTreeMap<String, VarId>,
) -> Result<GraphOut> {
    let in_shape = tape.value(input).shape().to_vec();
    if in_shape.len() != model.input_shape.len() + 1
        || in_shape[1..] != model.input_shape[..]
        || in_shape[0] == 0
    {
        return Err(Error::shape(
            "model input",
            &model.input_shape,
            &in_shape,
        ));
    }
    let batch = in_shape[0];
    let mut relu_inputs = Vec::new();
    let mut penultimate = input;
    let output = apply_layers(
        tape,
        &model.layers,
        "",
        input,
        batch,
        params,
        &mut relu_inputs,
        &mut penultimate,
        true,
    )?;
    Ok(GraphOut {
        output,
        penultimate,
        relu_inputs,
    })
}

#[allow(clippy::too_many_arguments)]
fn apply_layers(
    tape: &mut Tape,
    layers: &[LayerSpec],
    prefix: &str,
    input: VarId,
    batch: usize,
    params: &BTreeMap<String, VarId>,
    relu_inputs: &mut Vec<VarId>,
    penultimate: &mut VarId,
    top_level: bool,
) -> Result<VarId> {
    let mut cur = input;
    for (i, layer) in layers.iter().enumerate() {
        let name = if prefix.is_empty() {
            format!("l{i}")
        } else {
            format!("{prefix}.{i}")
        };
        let get = |p: &str| -> Result<VarId> {
            params
                .get(p)
                .copied()
                .ok_or_else(|| Error::invalid(format!("missing parameter variable {p}")))
        };
        if top_level && i == layers.len() - 1 && matches!(layer, LayerSpec::Dense { .. }) {
            *penultimate = cur;
        }
        cur = match layer {
            LayerSpec::Dense { .. } => {
                let w = get(&format!("{name}.w"))?;
                let b = get(&format!("{name}.b"))?;
                let y = tape.matmul(cur, w, false, false)?;
                let bb = tape.bcast_rows(b, batch)?;
                tape.add(y, bb)?
            }
            LayerSpec::Conv2d { .. } => {
                let w = get(&format!("{name}.w"))?;
                let b = get(&format!("{name}.b"))?;
                let y = tape.conv2d(cur, w)?;
                let shape = tape.value(y).shape().to_vec();
                let bb = tape.bcast_chan(b, shape[0], shape[2], shape[3])?;
                tape.add(y, bb)?
            }
            LayerSpec::Relu => {
                relu_inputs.push(cur);
                tape.relu(cur)?
            }
            LayerSpec::AvgPool2 => tape.avg_pool2(cur)?,
            LayerSpec::Flatten => {
                let n: usize = tape.value(cur).shape()[1..].iter().product();
                tape.reshape(cur, &[batch, n])?
            }
            LayerSpec::Upsample2 => tape.upsample2(cur)?,
            LayerSpec::Residual { body } => {
                let body_out = apply_layers(
                    tape,
                    body,
                    &name,
                    cur,
                    batch,
                    params,
                    relu_inputs,
                    penultimate,
                    false,
                )?;
                tape.add(cur, body_out)?
            }
        };
        if !tape.value(cur).is_finite() {
            return Err(Error::Layer {
                index: i,
                kind: format!("{layer:?}"),
                message: "non-finite activation".into(),
            });
        }
    }
    Ok(cur)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Cross-entropy of logits [B,K] against integer labels, stabilised by a
/// constant per-row max shift. The shift is a captured constant, so the node
/// is exactly differentiable to every order.
pub fn cross_entropy(
    tape: &mut Tape,
    logits: VarId,
    labels: &[usize],
    reduction: Reduction,
) -> Result<VarId> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("cross_entropy logits", &[0, 0], &shape));
    }
    let (b, k) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(Error::invalid(format!("{} labels for batch of {b}", labels.len())));
    }
    for &l in labels {
        if l >= k {
            return Err(Error::LabelOutOfRange { label: l, classes: k });
        }
    }
    let lse = log_sum_exp_rows(tape, logits)?;
    let idx = Arc::new(labels.to_vec());
    let picked = tape.gather_cols(logits, idx)?;
    let per = tape.sub(lse, picked)?;
    let total = tape.sum_all(per)?;
    match reduction {
        Reduction::Sum => Ok(total),
        Reduction::Mean => tape.affine(total, 1.0 / b as f64, 0.0),
    }
}

/// Cross-entropy against a soft target distribution [B,K] (rows should sum
/// to one; used for optimized-label attacks).
pub fn cross_entropy_soft(
    tape: &mut Tape,
    logits: VarId,
    targets: VarId,
    reduction: Reduction,
) -> Result<VarId> {
    let shape = tape.value(logits).shape().to_vec();
    if shape != tape.value(targets).shape() {
        return Err(Error::shape(
            "cross_entropy_soft targets",
            &shape,
            tape.value(targets).shape(),
        ));
    }
    let b = shape[0];
    let lse = log_sum_exp_rows(tape, logits)?;
    let weighted = tape.mul(targets, logits)?;
    let dot = tape.row_sum(weighted)?;
    let per = tape.sub(lse, dot)?;
    let total = tape.sum_all(per)?;
    match reduction {
        Reduction::Sum => Ok(total),
        Reduction::Mean => tape.affine(total, 1.0 / b as f64, 0.0),
    }
}

/// Row-wise log(sum(exp(z))) with constant max-shift: [B,K] -> [B].
pub fn log_sum_exp_rows(tape: &mut Tape, logits: VarId) -> Result<VarId> {
    let v = tape.value(logits);
    let (b, k) = (v.shape()[0], v.shape()[1]);
    let mut maxes = Vec::with_capacity(b);
    for i in 0..b {
        let row = &v.data()[i * k..(i + 1) * k];
        maxes.push(row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x)));
    }
    let m = tape.constant(Tensor::new_unchecked(vec![b], maxes));
    let mb = tape.bcast_cols(m, k)?;
    let shifted = tape.sub(logits, mb)?;
    let e = tape.exp(shifted)?;
    let s = tape.row_sum(e)?;
    let ls = tape.log(s)?;
    tape.add(ls, m)
}

/// Row-wise softmax: [B,K] -> [B,K], max-shifted for stability.
pub fn softmax_rows(tape: &mut Tape, logits: VarId) -> Result<VarId> {
    let v = tape.value(logits);
    let (b, k) = (v.shape()[0], v.shape()[1]);
    let mut maxes = Vec::with_capacity(b);
    for i in 0..b {
        let row = &v.data()[i * k..(i + 1) * k];
        maxes.push(row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x)));
    }
    let m = tape.constant(Tensor::new_unchecked(vec![b], maxes));
    let mb = tape.bcast_cols(m, k)?;
    let shifted = tape.sub(logits, mb)?;
    let e = tape.exp(shifted)?;
    let s = tape.row_sum(e)?;
    let sb = tape.bcast_cols(s, k)?;
    tape.div(e, sb)
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub loss: f64,
    pub by_param: BTreeMap<String, Tensor>,
    pub by_input: Tensor,
}

/// Mean cross-entropy loss and its gradients with respect to every parameter
/// and the input batch.
pub fn loss_and_grads(model: &Model, batch: &Tensor, labels: &[usize]) -> Result<Gradients> {
    loss_and_grads_reduced(model, batch, labels, Reduction::Mean)
}

pub fn loss_and_grads_reduced(
    model: &Model,
    batch: &Tensor,
    labels: &[usize],
    reduction: Reduction,
) -> Result<Gradients> {
    let mut tape = Tape::new();
    let input = tape.leaf(batch.clone(), true);
    let params = model.insert_params(&mut tape, true);
    let graph = build_graph(&mut tape, model, input, &params)?;
    let loss = cross_entropy(&mut tape, graph.output, labels, reduction)?;

    let mut targets = vec![input];
    targets.extend(params.values().copied());
    let grads = tape.backward(loss, &targets)?;

    let zero_for = |shape: &[usize]| Tensor::zeros(shape);
    let by_input = match grads[0] {
        Some(id) => tape.value(id).clone(),
        None => zero_for(batch.shape()),
    };
    let mut by_param = BTreeMap::new();
    for ((name, _), grad) in params.iter().zip(grads[1..].iter()) {
        let t = match grad {
            Some(id) => tape.value(*id).clone(),
            None => zero_for(model.params[name].shape()),
        };
        by_param.insert(name.clone(), t);
    }
    let loss_value = tape.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(Error::NonFinite {
            context: "loss".into(),
        });
    }
    Ok(Gradients {
        loss: loss_value,
        by_param,
        by_input,
    })
}

/// One plain gradient-descent step: theta' = theta - lr * grad. A zero rate
/// is allowed (it is the identity); negative or non-finite rates are not.
pub fn sgd_step(model: &Model, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<Model> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::invalid(format!("learning rate must be >= 0, got {lr}")));
    }
    let mut params = BTreeMap::new();
    for (name, value) in &model.params {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing gradient for {name}")))?;
        if g.shape() != value.shape() {
            return Err(Error::shape(
                format!("gradient for {name}"),
                value.shape(),
                g.shape(),
            ));
        }
        params.insert(name.clone(), value.zip_map(g, |p, gv| p - lr * gv)?);
    }
    model.replace_params(params)
}

fn forward_loss(model: &Model, batch: &Tensor, labels: &[usize]) -> Result<(f64, Vec<bool>)> {
    let mut tape = Tape::new();
    let input = tape.constant(batch.clone());
    let params = model.insert_params(&mut tape, false);
    let graph = build_graph(&mut tape, model, input, &params)?;
    let loss = cross_entropy(&mut tape, graph.output, labels, Reduction::Mean)?;
    let mut mask = Vec::new();
    for &r in &graph.relu_inputs {
        mask.extend(tape.value(r).data().iter().map(|&v| v > 0.0));
    }
    Ok((tape.value(loss).data()[0], mask))
}

/// Compares reverse-mode gradients against central finite differences on a
/// deterministic sample of parameter and input coordinates, returning the
/// worst relative error `|num - ana| / max(|num|, |ana|, 1e-12)`.
///
/// Coordinates whose +-eps perturbation flips a relu mask are skipped: the
/// loss is not differentiable across the kink, so a finite difference there
/// measures nothing the analytic gradient is claiming.
pub fn grad_check(model: &Model, batch: &Tensor, labels: &[usize], eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(format!("eps must be in (0, 1e-2], got {eps}")));
    }
    let grads = loss_and_grads(model, batch, labels)?;
    let mut worst: f64 = 0.0;

    let mut check = |analytic: f64, plus: (f64, Vec<bool>), minus: (f64, Vec<bool>)| {
        if plus.1 != minus.1 {
            return; // kink crossed; finite difference invalid here
        }
        let num = (plus.0 - minus.0) / (2.0 * eps);
        let rel = (num - analytic).abs() / num.abs().max(analytic.abs()).max(1e-12);
        worst = worst.max(rel);
    };

    for (name, base) in &model.params {
        let analytic = &grads.by_param[name];
        for ci in sample_coords(base.numel()) {
            let perturbed = |delta: f64| -> Result<(f64, Vec<bool>)> {
                let mut data = base.data().to_vec();
                data[ci] += delta;
                let mut params = model.params.clone();
                params.insert(name.clone(), Tensor::new_unchecked(base.shape().to_vec(), data));
                let m = model.replace_params(params)?;
                forward_loss(&m, batch, labels)
            };
            check(
                analytic.data()[ci],
                perturbed(eps)?,
                perturbed(-eps)?,
            );
        }
    }

    for ci in sample_coords(batch.numel()) {
        let perturbed = |delta: f64| -> Result<(f64, Vec<bool>)> {
            let mut data = batch.data().to_vec();
            data[ci] += delta;
            let b = Tensor::new_unchecked(batch.shape().to_vec(), data);
            forward_loss(model, &b, labels)
        };
        check(
            grads.by_input.data()[ci],
            perturbed(eps)?,
            perturbed(-eps)?,
        );
    }

    Ok(worst)
}

/// Up to 12 distinct coordinates of an n-element tensor, deterministic in n.
fn sample_coords(n: usize) -> Vec<usize> {
    if n <= 12 {
        return (0..n).collect();
    }
    let mut rng = Rng::new(0x6e5a_11ce ^ n as u64);
    let mut seen = std::collections::BTreeSet::new();
    while seen.len() < 12 {
        seen.insert(rng.below(n));
    }
    seen.into_iter().collect()
}
