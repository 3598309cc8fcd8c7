//! Reconstruction quality metrics and the matching that precedes them.
//!
//! Reconstructions come out of an attack in no particular order, so scoring
//! starts by solving a min-MSE assignment between reconstructed and true
//! images (Hungarian algorithm, exact). Per-pair metrics are then computed
//! on matched pairs: MSE, PSNR, SSIM, and optionally a proxy perceptual
//! distance in a probe network's embedding space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

/// Peak signal-to-noise ratio in dB for signals in [0,1]. Near-exact
/// reconstructions are capped: mse below 1e-10 reports 99.0 dB.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mse = a.mse(b)?;
    if mse < 1e-10 {
        return Ok(99.0);
    }
    Ok((-10.0 * mse.log10()).min(99.0))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut total = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let d2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            total += v;
        }
    }
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Mean SSIM over valid (fully inside) 11x11 Gaussian-weighted windows,
/// averaged across channels. Inputs are single images shaped [C,H,W] with
/// dynamic range 1.0; spatial dims must be at least the window size.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", a.shape(), b.shape()));
    }
    if a.shape().len() != 3 {
        return Err(Error::invalid(format!(
            "ssim expects [C,H,W] images, got {:?}",
            a.shape()
        )));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);

    let mut channel_mean = 0.0;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        let mut acc = 0.0;
        let mut count = 0usize;
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    let row = (y0 + dy) * w + x0;
                    let wrow = dy * SSIM_WINDOW;
                    for dx in 0..SSIM_WINDOW {
                        let wv = win[wrow + dx];
                        let av = pa[row + dx];
                        let bv = pb[row + dx];
                        ma += wv * av;
                        mb += wv * bv;
                        saa += wv * av * av;
                        sbb += wv * bv * bv;
                        sab += wv * av * bv;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
                let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
                acc += num / den;
                count += 1;
            }
        }
        channel_mean += acc / count as f64;
    }
    Ok(channel_mean / c as f64)
}

/// Cosine distance between probe embeddings: 1 - cos(phi(a), phi(b)), where
/// phi is the probe's penultimate activation. If either embedding has zero
/// norm the distance is defined as 1.0.
pub fn proxy_perceptual(a: &Tensor, b: &Tensor, probe: &Model) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("proxy_perceptual", a.shape(), b.shape()));
    }
    let batchify = |t: &Tensor| -> Result<Tensor> {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        t.reshape(&shape)
    };
    let ea = probe.features(&batchify(a)?)?;
    let eb = probe.features(&batchify(b)?)?;
    let flat_a = ea.reshape(&[ea.numel()])?;
    let flat_b = eb.reshape(&[eb.numel()])?;
    let na = flat_a.norm_l2();
    let nb = flat_b.norm_l2();
    if na == 0.0 || nb == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - flat_a.dot(&flat_b)? / (na * nb))
}

/// Exact minimum-cost assignment on a square cost matrix (Hungarian
/// algorithm with potentials, O(n^3)). Returns `assign` with `assign[row] =
/// col` and the total cost. Ties resolve deterministically toward lower
/// column indices.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    let n = cost.len();
    if n == 0 {
        return Err(Error::invalid("empty cost matrix"));
    }
    for row in cost {
        if row.len() != n {
            return Err(Error::invalid("cost matrix must be square"));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "assignment cost".into(),
            });
        }
    }

    // 1-indexed potentials; p[j] = row assigned to column j.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| cost[i][assign[i]]).sum();
    Ok((assign, total))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Summary {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    /// Index of the reconstruction within the attack batch.
    pub reconstruction: usize,
    /// Index of the true image it was matched to.
    pub matched_truth: usize,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub proxy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricAggregates {
    pub mse: Summary,
    pub psnr: Summary,
    pub ssim: Summary,
    pub proxy: Option<Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// assignment[i] = index of the true image matched to reconstruction i.
    pub assignment: Vec<usize>,
    pub pairs: Vec<PairMetrics>,
    pub aggregates: MetricAggregates,
}

/// Matches reconstructions to true images by minimum total MSE, then scores
/// each matched pair. Both tensors are [B,C,H,W] with equal shapes.
pub fn match_reconstructions(
    x_hat: &Tensor,
    x_true: &Tensor,
    probe: Option<&Model>,
) -> Result<MetricReport> {
    if x_hat.shape() != x_true.shape() {
        return Err(Error::shape("match_reconstructions", x_true.shape(), x_hat.shape()));
    }
    if x_hat.shape().len() != 4 {
        return Err(Error::invalid("match_reconstructions expects [B,C,H,W]"));
    }
    let b = x_hat.shape()[0];
    let image_shape = &x_hat.shape()[1..];

    let image = |t: &Tensor, i: usize| -> Result<Tensor> {
        t.row(i)?.reshape(image_shape)
    };

    let mut cost = vec![vec![0.0; b]; b];
    for (i, row) in cost.iter_mut().enumerate() {
        let ri = image(x_hat, i)?;
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = ri.mse(&image(x_true, j)?)?;
        }
    }
    let (assignment, _) = min_cost_assignment(&cost)?;

    let mut pairs = Vec::with_capacity(b);
    for i in 0..b {
        let j = assignment[i];
        let ri = image(x_hat, i)?;
        let tj = image(x_true, j)?;
        let mse = cost[i][j];
        pairs.push(PairMetrics {
            reconstruction: i,
            matched_truth: j,
            mse,
            psnr: psnr(&ri, &tj)?,
            ssim: ssim(&ri, &tj)?,
            proxy: match probe {
                Some(p) => Some(proxy_perceptual(&ri, &tj, p)?),
                None => None,
            },
        });
    }

    let collect = |f: &dyn Fn(&PairMetrics) -> f64| -> Vec<f64> { pairs.iter().map(f).collect() };
    let aggregates = MetricAggregates {
        mse: Summary::of(&collect(&|p| p.mse)),
        psnr: Summary::of(&collect(&|p| p.psnr)),
        ssim: Summary::of(&collect(&|p| p.ssim)),
        proxy: if probe.is_some() {
            Some(Summary::of(&collect(&|p| p.proxy.unwrap_or(0.0))))
        } else {
            None
        },
    };
    Ok(MetricReport {
        assignment,
        pairs,
        aggregates,
    })
}

/// One-sided exact sign test: probability of at least `wins` successes in
/// `wins + losses` fair coin flips. Ties must be excluded by the caller.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    // Pascal row in f64; relative error is far below any decision threshold.
    let mut row = vec![1.0f64];
    for _ in 0..n {
        let mut next = vec![1.0; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    let total: f64 = 2.0f64.powi(n as i32);
    row[wins..].iter().sum::<f64>() / total
}
