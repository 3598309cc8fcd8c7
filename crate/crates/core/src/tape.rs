//! Reverse-mode autodiff on an explicit tape.
//!
//! The design constraint that shapes everything here: gradient inversion
//! needs gradients *of* gradients. `backward` therefore does not fill a
//! float buffer; it appends ordinary ops to the tape, so the gradient of a
//! loss is itself a differentiable node and a second `backward` call through
//! it is exact. The op set is closed under differentiation: every rule below
//! emits only ops that exist on the tape.
//!
//! Values are evaluated eagerly at construction, which keeps shape errors
//! local and lets callers inspect intermediate values (the cosine loss uses
//! this to special-case zero-norm candidates).
//!
//! Nonsmooth ops (`relu`, `abs`) differentiate via masks captured as
//! constants, the standard almost-everywhere convention; `relu'(0) = 0`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(u32);

impl VarId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Div(VarId, VarId),
    Affine { x: VarId, mul: f64 },
    MatMul { a: VarId, b: VarId, ta: bool, tb: bool },
    Conv2d { x: VarId, k: VarId },
    ConvKernelGrad { x: VarId, g: VarId },
    KernelFlip(VarId),
    Relu(VarId),
    Abs(VarId),
    Exp(VarId),
    Log(VarId),
    Sqrt(VarId),
    AvgPool2(VarId),
    Upsample2(VarId),
    Reshape(VarId),
    SumAll(VarId),
    BcastAll(VarId),
    SumRows(VarId),
    BcastRows(VarId),
    RowSum(VarId),
    BcastCols(VarId),
    SumChan(VarId),
    BcastChan(VarId),
    GatherCols { x: VarId, idx: Arc<Vec<usize>> },
    ScatterCols { x: VarId, idx: Arc<Vec<usize>> },
    TakeRows { x: VarId, idx: Arc<Vec<usize>> },
    PutRows { x: VarId, idx: Arc<Vec<usize>> },
    DiffH(VarId),
    DiffHAdj(VarId),
    DiffW(VarId),
    DiffWAdj(VarId),
}

impl Op {
    fn parents(&self) -> [Option<VarId>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => [Some(a), Some(b)],
            MatMul { a, b, .. } => [Some(a), Some(b)],
            Conv2d { x, k } => [Some(x), Some(k)],
            ConvKernelGrad { x, g } => [Some(x), Some(g)],
            Affine { x, .. }
            | KernelFlip(x)
            | Relu(x)
            | Abs(x)
            | Exp(x)
            | Log(x)
            | Sqrt(x)
            | AvgPool2(x)
            | Upsample2(x)
            | Reshape(x)
            | SumAll(x)
            | BcastAll(x)
            | SumRows(x)
            | BcastRows(x)
            | RowSum(x)
            | BcastCols(x)
            | SumChan(x)
            | BcastChan(x)
            | GatherCols { x, .. }
            | ScatterCols { x, .. }
            | TakeRows { x, .. }
            | PutRows { x, .. }
            | DiffH(x)
            | DiffHAdj(x)
            | DiffW(x)
            | DiffWAdj(x) => [Some(x), None],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.idx()].value
    }

    pub fn requires_grad(&self, id: VarId) -> bool {
        self.nodes[id.idx()].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> VarId {
        assert!(self.nodes.len() < u32::MAX as usize, "tape overflow");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        VarId(self.nodes.len() as u32 - 1)
    }

    fn inherits(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|id| self.nodes[id.idx()].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.inherits(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.inherits(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.inherits(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "div".into(),
            });
        }
        let rg = self.inherits(&[a, b]);
        Ok(self.push(v, Op::Div(a, b), rg))
    }

    /// `mul * x + add`, elementwise with scalar constants.
    pub fn affine(&mut self, x: VarId, mul: f64, add: f64) -> Result<VarId> {
        if !mul.is_finite() || !add.is_finite() {
            return Err(Error::invalid("affine constants must be finite"));
        }
        let v = self.value(x).map(|t| mul * t + add);
        let rg = self.inherits(&[x]);
        Ok(self.push(v, Op::Affine { x, mul }, rg))
    }

    /// 2-D matrix product with optional transposes of the stored operands.
    pub fn matmul(&mut self, a: VarId, b: VarId, ta: bool, tb: bool) -> Result<VarId> {
        let v = matmul_eval(self.value(a), self.value(b), ta, tb)?;
        let rg = self.inherits(&[a, b]);
        Ok(self.push(v, Op::MatMul { a, b, ta, tb }, rg))
    }

    /// 3x3 stride-1 same-padding convolution: x [B,Ci,H,W], k [Co,Ci,3,3].
    pub fn conv2d(&mut self, x: VarId, k: VarId) -> Result<VarId> {
        let v = conv2d_eval(self.value(x), self.value(k))?;
        let rg = self.inherits(&[x, k]);
        Ok(self.push(v, Op::Conv2d { x, k }, rg))
    }

    /// Kernel-shaped correlation of input x [B,Ci,H,W] with g [B,Co,H,W];
    /// this is the gradient of `conv2d` with respect to its kernel.
    pub fn conv_kernel_grad(&mut self, x: VarId, g: VarId) -> Result<VarId> {
        let v = conv_kernel_grad_eval(self.value(x), self.value(g))?;
        let rg = self.inherits(&[x, g]);
        Ok(self.push(v, Op::ConvKernelGrad { x, g }, rg))
    }

    /// Swaps kernel in/out channels and rotates the window 180 degrees.
    pub fn kernel_flip(&mut self, k: VarId) -> Result<VarId> {
        let v = kernel_flip_eval(self.value(k))?;
        let rg = self.inherits(&[k]);
        Ok(self.push(v, Op::KernelFlip(k), rg))
    }

    pub fn relu(&mut self, x: VarId) -> Result<VarId> {
        let v = self.value(x).map(|t| t.max(0.0));
        let rg = self.inherits(&[x]);
        Ok(self.push(v, Op::Relu(x), rg))
    }

    pub fn abs(&mut self, x: VarId) -> Result<VarId> {
        let v = self.value(x).map(f64::abs);
        let rg = self.inherits(&[x]);
        Ok(self.push(v, Op::Abs(x), rg))
    }

    pub fn exp(&mut self, x: VarId) -> Result<VarId> {
        let v = self.value(x).map(f64::exp);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "exp".into(),
            });
        }
        let rg = self.inherits(&[x]);
        Ok(self.push(v, Op::Exp(x), rg))
    }

    pub fn log(&mut self, x: VarId) -> Result<VarId> {
        let v = self.value(x).map(f64::ln);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "log".into(),
            });
        }
        let rg = self.inherits(&[x]);
        Ok(self.push(v, Op::Log(x), rg))
    }

    pub fn sqrt(&mut self, x: VarId) -> Result<VarId> {
        let v = self.value(x).map(f64::sqrt);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "sqrt".into(),
            });
        }
        let rg = self.inherits(&[x]);
        Ok(self.push(v, Op::Sqrt(x), rg))
    }

    /// 2x2 stride-2 average pooling; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: VarId) -> Result<VarId> {
        let v = avg_pool2_eval(self.value(x))?;
        let rg = self.inherits(&[x]);
        Ok(self.push(v, Op::AvgPool2(x), rg))
    }

    /// Nearest-neighbour 2x upsampling of [B,C,H,W].
    pub fn upsample2(&mut self, x: VarId) -> Result<VarId> {
        let v = self.value(x).upsample_nearest(2)?;
        let rg = self.inherits(&[x]);
        Ok(self.push(v, Op::Upsample2(x), rg))
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> Result<VarId> {
        let v = self.value(x).reshape(shape)?;
        let rg = self.inherits(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    pub fn sum_all(&mut self, x: VarId) -> Result<VarId> {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.inherits(&[x]);
        Ok(self.push(v, Op::SumAll(x), rg))
    }

    /// Broadcasts a scalar [1] to an arbitrary shape.
    pub fn bcast_all(&mut self, x: VarId, shape: &[usize]) -> Result<VarId> {
        let xv = self.value(x);
        if xv.numel() != 1 {
            return Err(Error::shape("bcast_all input", &[1], xv.shape()));
        }
        let v = Tensor::filled(shape, xv.data()[0]);
        let rg = self.inherits(&[x]);
        Ok(self.push(v, Op::BcastAll(x), rg))
    }

    /// [B,K] -> [K], summing over rows.
    pub fn sum_rows(&mut self, x: VarId) -> Result<VarId> {
        let v = sum_rows_eval(self.value(x))?;
        let rg = self.inherits(&[x]);
        Ok(self.push(v, Op::SumRows(x), rg))
    }

    /// [K] -> [rows,K], repeating the vector on every row.
    pub fn bcast_rows(&mut self, x: VarId, rows: usize) -> Result<VarId> {
        let xv = self.value(x);
        if xv.shape().len() != 1 {
            return Err(Error::shape("bcast_rows input", &[0], xv.shape()));
        }
        let k = xv.shape()[0];
        let mut data = Vec::with_capacity(rows * k);
        for _ in 0..rows {
            data.extend_from_slice(xv.data());
        }
        let v = Tensor::new_unchecked(vec![rows, k], data);
        let rg = self.inherits(&[x]);
        Ok(self.push(v, Op::BcastRows(x), rg))
    }

    /// [B,K] -> [B], summing over columns.
    pub fn row_sum(&mut self, x: VarId) -> Result<VarId> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::shape("row_sum input", &[0, 0], xv.shape()));
        }
        let (b, k) = (xv.shape()[0], xv.shape()[1]);
        let data = (0..b)
            .map(|i| xv.data()[i * k..(i + 1) * k].iter().sum())
            .collect();
        let v = Tensor::new_unchecked(vec![b], data);
        let rg = self.inherits(&[x]);
        Ok(self.push(v, Op::RowSum(x), rg))
    }

    /// [B] -> [B,cols], repeating each entry along a new column axis.
    pub fn bcast_cols(&mut self, x: VarId, cols: usize) -> Result<VarId> {
        let xv = self.value(x);
        if xv.shape().len() != 1 {
            return Err(Error::shape("bcast_cols input", &[0], xv.shape()));
        }
        let b = xv.shape()[0];
        let mut data = Vec::with_capacity(b * cols);
        for i in 0..b {
            data.extend(std::iter::repeat_n(xv.data()[i], cols));
        }
        let v = Tensor::new_unchecked(vec![b, cols], data);
        let rg = self.inherits(&[x]);
        Ok(self.push(v, Op::BcastCols(x), rg))
    }

    /// [B,C,H,W] -> [C], summing over batch and space.
    pub fn sum_chan(&mut self, x: VarId) -> Result<VarId> {
        let xv = self.value(x);
        if xv.shape().len() != 4 {
            return Err(Error::invalid("sum_chan expects [B,C,H,W]"));
        }
        let (b, c, h, w) = dims4(xv);
        let hw = h * w;
        let mut data = vec![0.0; c];
        for bi in 0..b {
            for (ci, slot) in data.iter_mut().enumerate() {
                let off = (bi * c + ci) * hw;
                *slot += xv.data()[off..off + hw].iter().sum::<f64>();
            }
        }
        let v = Tensor::new_unchecked(vec![c], data);
        let rg = self.inherits(&[x]);
        Ok(self.push(v, Op::SumChan(x), rg))
    }

    /// [C] -> [B,C,H,W], repeating each channel value over batch and space.
    pub fn bcast_chan(&mut self, x: VarId, b: usize, h: usize, w: usize) -> Result<VarId> {
        let xv = self.value(x);
        if xv.shape().len() != 1 {
            return Err(Error::shape("bcast_chan input", &[0], xv.shape()));
        }
        let c = xv.shape()[0];
        let mut data = Vec::with_capacity(b * c * h * w);
        for _ in 0..b {
            for ci in 0..c {
                data.extend(std::iter::repeat_n(xv.data()[ci], h * w));
            }
        }
        let v = Tensor::new_unchecked(vec![b, c, h, w], data);
        let rg = self.inherits(&[x]);
        Ok(self.push(v, Op::BcastChan(x), rg))
    }

    /// y[b] = x[b, idx[b]] for x [B,K].
    pub fn gather_cols(&mut self, x: VarId, idx: Arc<Vec<usize>>) -> Result<VarId> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::shape("gather_cols input", &[0, 0], xv.shape()));
        }
        let (b, k) = (xv.shape()[0], xv.shape()[1]);
        if idx.len() != b {
            return Err(Error::invalid(format!(
                "gather_cols: {} indices for {b} rows",
                idx.len()
            )));
        }
        let mut data = Vec::with_capacity(b);
        for (i, &j) in idx.iter().enumerate() {
            if j >= k {
                return Err(Error::LabelOutOfRange {
                    label: j,
                    classes: k,
                });
            }
            data.push(xv.data()[i * k + j]);
        }
        let v = Tensor::new_unchecked(vec![b], data);
        let rg = self.inherits(&[x]);
        Ok(self.push(v, Op::GatherCols { x, idx }, rg))
    }

    /// y[b, idx[b]] = x[b], zeros elsewhere; adjoint of `gather_cols`.
    pub fn scatter_cols(&mut self, x: VarId, idx: Arc<Vec<usize>>, cols: usize) -> Result<VarId> {
        let xv = self.value(x);
        if xv.shape().len() != 1 {
            return Err(Error::shape("scatter_cols input", &[0], xv.shape()));
        }
        let b = xv.shape()[0];
        if idx.len() != b {
            return Err(Error::invalid(format!(
                "scatter_cols: {} indices for {b} rows",
                idx.len()
            )));
        }
        let mut data = vec![0.0; b * cols];
        for (i, &j) in idx.iter().enumerate() {
            if j >= cols {
                return Err(Error::LabelOutOfRange {
                    label: j,
                    classes: cols,
                });
            }
            data[i * cols + j] = xv.data()[i];
        }
        let v = Tensor::new_unchecked(vec![b, cols], data);
        let rg = self.inherits(&[x]);
        Ok(self.push(v, Op::ScatterCols { x, idx }, rg))
    }

    /// Row selection along the leading axis; duplicates are allowed.
    pub fn take_rows(&mut self, x: VarId, idx: Arc<Vec<usize>>) -> Result<VarId> {
        let v = self.value(x).take_rows(&idx)?;
        let rg = self.inherits(&[x]);
        Ok(self.push(v, Op::TakeRows { x, idx }, rg))
    }

    /// Scatter-add of rows into a tensor with `rows` leading entries;
    /// adjoint of `take_rows`.
    pub fn put_rows(&mut self, x: VarId, idx: Arc<Vec<usize>>, rows: usize) -> Result<VarId> {
        let xv = self.value(x);
        if xv.shape().is_empty() {
            return Err(Error::invalid("put_rows on rank-0 tensor"));
        }
        if xv.shape()[0] != idx.len() {
            return Err(Error::invalid(format!(
                "put_rows: {} indices for {} rows",
                idx.len(),
                xv.shape()[0]
            )));
        }
        let stride: usize = xv.shape()[1..].iter().product();
        let mut shape = xv.shape().to_vec();
        shape[0] = rows;
        let mut data = vec![0.0; rows * stride];
        for (i, &r) in idx.iter().enumerate() {
            if r >= rows {
                return Err(Error::invalid(format!("put_rows: row {r} out of 0..{rows}")));
            }
            for j in 0..stride {
                data[r * stride + j] += xv.data()[i * stride + j];
            }
        }
        let v = Tensor::new_unchecked(shape, data);
        let rg = self.inherits(&[x]);
        Ok(self.push(v, Op::PutRows { x, idx }, rg))
    }

    /// Vertical forward differences of [B,C,H,W]: out height H-1.
    pub fn diff_h(&mut self, x: VarId) -> Result<VarId> {
        let v = diff_h_eval(self.value(x))?;
        let rg = self.inherits(&[x]);
        Ok(self.push(v, Op::DiffH(x), rg))
    }

    /// Adjoint of `diff_h`: [B,C,H-1,W] -> [B,C,H,W].
    pub fn diff_h_adj(&mut self, x: VarId) -> Result<VarId> {
        let v = diff_h_adj_eval(self.value(x))?;
        let rg = self.inherits(&[x]);
        Ok(self.push(v, Op::DiffHAdj(x), rg))
    }

    /// Horizontal forward differences of [B,C,H,W]: out width W-1.
    pub fn diff_w(&mut self, x: VarId) -> Result<VarId> {
        let v = diff_w_eval(self.value(x))?;
        let rg = self.inherits(&[x]);
        Ok(self.push(v, Op::DiffW(x), rg))
    }

    /// Adjoint of `diff_w`: [B,C,H,W-1] -> [B,C,H,W].
    pub fn diff_w_adj(&mut self, x: VarId) -> Result<VarId> {
        let v = diff_w_adj_eval(self.value(x))?;
        let rg = self.inherits(&[x]);
        Ok(self.push(v, Op::DiffWAdj(x), rg))
    }

    /// Reverse-mode sweep from a scalar `root`. Returns one gradient node per
    /// target (None when the root does not depend on that target). The
    /// returned nodes are ordinary tape nodes: calling `backward` again on a
    /// scalar built from them yields exact higher-order derivatives.
    pub fn backward(&mut self, root: VarId, targets: &[VarId]) -> Result<Vec<Option<VarId>>> {
        if self.value(root).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let n = root.idx() + 1;

        // A node needs a gradient iff the root depends on it and it depends on
        // (or is) some target. Restricting the sweep to that set avoids
        // building gradient subgraphs nobody asked for.
        let mut below_root = vec![false; n];
        below_root[root.idx()] = true;
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            for p in self.nodes[id.idx()].op.parents().into_iter().flatten() {
                if !below_root[p.idx()] && self.nodes[p.idx()].requires_grad {
                    below_root[p.idx()] = true;
                    stack.push(p);
                }
            }
        }
        let mut above_target = vec![false; n];
        for t in targets {
            if t.idx() < n {
                above_target[t.idx()] = true;
            }
        }
        for id in 0..n {
            if above_target[id] {
                continue;
            }
            above_target[id] = self.nodes[id]
                .op
                .parents()
                .into_iter()
                .flatten()
                .any(|p| above_target[p.idx()]);
        }
        let active = |id: usize| below_root[id] && above_target[id];

        let mut grads: Vec<Option<VarId>> = vec![None; n];
        let seed = self.constant(Tensor::filled(self.value(root).shape(), 1.0));
        grads[root.idx()] = Some(seed);

        for id in (0..n).rev() {
            if !active(id) {
                continue;
            }
            let g = match grads[id] {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[id].op.clone();
            let contributions = self.op_backward(VarId(id as u32), &op, g)?;
            for (parent, contrib) in contributions {
                if !active(parent.idx()) {
                    continue;
                }
                grads[parent.idx()] = Some(match grads[parent.idx()] {
                    Some(acc) => self.add(acc, contrib)?,
                    None => contrib,
                });
            }
        }

        Ok(targets
            .iter()
            .map(|t| grads.get(t.idx()).copied().flatten())
            .collect())
    }

    /// Per-op gradient rules. `out` is the node being differentiated, `g` the
    /// incoming gradient with `out`'s shape. Returns (parent, contribution)
    /// pairs; the contributions are new tape nodes.
    fn op_backward(&mut self, out: VarId, op: &Op, g: VarId) -> Result<Vec<(VarId, VarId)>> {
        use Op::*;
        Ok(match op {
            Leaf => vec![],
            Add(a, b) => vec![(*a, g), (*b, g)],
            Sub(a, b) => {
                let neg = self.affine(g, -1.0, 0.0)?;
                vec![(*a, g), (*b, neg)]
            }
            Mul(a, b) => {
                let da = self.mul(g, *b)?;
                let db = self.mul(g, *a)?;
                vec![(*a, da), (*b, db)]
            }
            Div(a, b) => {
                // d(a/b) = g/b for a, -g*(a/b)/b for b.
                let da = self.div(g, *b)?;
                let gy = self.mul(g, out)?;
                let gyb = self.div(gy, *b)?;
                let db = self.affine(gyb, -1.0, 0.0)?;
                vec![(*a, da), (*b, db)]
            }
            Affine { x, mul } => {
                let dx = self.affine(g, *mul, 0.0)?;
                vec![(*x, dx)]
            }
            MatMul { a, b, ta, tb } => {
                let da = if !*ta {
                    self.matmul(g, *b, false, !*tb)?
                } else {
                    self.matmul(*b, g, *tb, true)?
                };
                let db = if !*tb {
                    self.matmul(*a, g, !*ta, false)?
                } else {
                    self.matmul(g, *a, true, *ta)?
                };
                vec![(*a, da), (*b, db)]
            }
            Conv2d { x, k } => {
                let flipped = self.kernel_flip(*k)?;
                let dx = self.conv2d(g, flipped)?;
                let dk = self.conv_kernel_grad(*x, g)?;
                vec![(*x, dx), (*k, dk)]
            }
            ConvKernelGrad { x, g: gsrc } => {
                let flipped = self.kernel_flip(g)?;
                let dx = self.conv2d(*gsrc, flipped)?;
                let dg = self.conv2d(*x, g)?;
                vec![(*x, dx), (*gsrc, dg)]
            }
            KernelFlip(x) => {
                let dx = self.kernel_flip(g)?;
                vec![(*x, dx)]
            }
            Relu(x) => {
                let mask = self.value(*x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(mask);
                let dx = self.mul(g, mask)?;
                vec![(*x, dx)]
            }
            Abs(x) => {
                let sign = self.value(*x).map(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                let sign = self.constant(sign);
                let dx = self.mul(g, sign)?;
                vec![(*x, dx)]
            }
            Exp(x) => {
                let dx = self.mul(g, out)?;
                vec![(*x, dx)]
            }
            Log(x) => {
                let dx = self.div(g, *x)?;
                vec![(*x, dx)]
            }
            Sqrt(x) => {
                let half = self.affine(g, 0.5, 0.0)?;
                let dx = self.div(half, out)?;
                vec![(*x, dx)]
            }
            AvgPool2(x) => {
                let up = self.upsample2(g)?;
                let dx = self.affine(up, 0.25, 0.0)?;
                vec![(*x, dx)]
            }
            Upsample2(x) => {
                let pooled = self.avg_pool2(g)?;
                let dx = self.affine(pooled, 4.0, 0.0)?;
                vec![(*x, dx)]
            }
            Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                let dx = self.reshape(g, &shape)?;
                vec![(*x, dx)]
            }
            SumAll(x) => {
                let shape = self.value(*x).shape().to_vec();
                let dx = self.bcast_all(g, &shape)?;
                vec![(*x, dx)]
            }
            BcastAll(x) => {
                let dx = self.sum_all(g)?;
                vec![(*x, dx)]
            }
            SumRows(x) => {
                let rows = self.value(*x).shape()[0];
                let dx = self.bcast_rows(g, rows)?;
                vec![(*x, dx)]
            }
            BcastRows(x) => {
                let dx = self.sum_rows(g)?;
                vec![(*x, dx)]
            }
            RowSum(x) => {
                let cols = self.value(*x).shape()[1];
                let dx = self.bcast_cols(g, cols)?;
                vec![(*x, dx)]
            }
            BcastCols(x) => {
                let dx = self.row_sum(g)?;
                vec![(*x, dx)]
            }
            SumChan(x) => {
                let (b, _, h, w) = dims4(self.value(*x));
                let dx = self.bcast_chan(g, b, h, w)?;
                vec![(*x, dx)]
            }
            BcastChan(x) => {
                let dx = self.sum_chan(g)?;
                vec![(*x, dx)]
            }
            GatherCols { x, idx } => {
                let cols = self.value(*x).shape()[1];
                let dx = self.scatter_cols(g, idx.clone(), cols)?;
                vec![(*x, dx)]
            }
            ScatterCols { x, idx } => {
                let dx = self.gather_cols(g, idx.clone())?;
                vec![(*x, dx)]
            }
            TakeRows { x, idx } => {
                let rows = self.value(*x).shape()[0];
                let dx = self.put_rows(g, idx.clone(), rows)?;
                vec![(*x, dx)]
            }
            PutRows { x, idx } => {
                let dx = self.take_rows(g, idx.clone())?;
                vec![(*x, dx)]
            }
            DiffH(x) => {
                let dx = self.diff_h_adj(g)?;
                vec![(*x, dx)]
            }
            DiffHAdj(x) => {
                let dx = self.diff_h(g)?;
                vec![(*x, dx)]
            }
            DiffW(x) => {
                let dx = self.diff_w_adj(g)?;
                vec![(*x, dx)]
            }
            DiffWAdj(x) => {
                let dx = self.diff_w(g)?;
                vec![(*x, dx)]
            }
        })
    }
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

fn matmul_eval(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::invalid(format!(
            "matmul expects 2-D operands, got {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, ka) = if ta {
        (a.shape()[1], a.shape()[0])
    } else {
        (a.shape()[0], a.shape()[1])
    };
    let (kb, n) = if tb {
        (b.shape()[1], b.shape()[0])
    } else {
        (b.shape()[0], b.shape()[1])
    };
    if ka != kb {
        return Err(Error::shape("matmul contraction", &[ka], &[kb]));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    // Contraction index ascends innermost per output cell, so per-sample sums
    // and batched sums fold in the same order.
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..ka {
                let av = if ta { ad[l * m + i] } else { ad[i * ka + l] };
                let bv = if tb { bd[j * kb + l] } else { bd[l * n + j] };
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    Ok(Tensor::new_unchecked(vec![m, n], out))
}

fn conv2d_eval(x: &Tensor, k: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 4 {
        return Err(Error::invalid(format!(
            "conv2d input must be [B,Ci,H,W], got {:?}",
            x.shape()
        )));
    }
    if k.shape().len() != 4 || k.shape()[2] != 3 || k.shape()[3] != 3 {
        return Err(Error::invalid(format!(
            "conv2d kernel must be [Co,Ci,3,3], got {:?}",
            k.shape()
        )));
    }
    let (b, ci, h, w) = dims4(x);
    let co = k.shape()[0];
    if k.shape()[1] != ci {
        return Err(Error::shape("conv2d channels", &[ci], &[k.shape()[1]]));
    }
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; b * co * h * w];
    for bi in 0..b {
        for o in 0..co {
            let out_off = (bi * co + o) * h * w;
            for c in 0..ci {
                let x_off = (bi * ci + c) * h * w;
                let k_off = (o * ci + c) * 9;
                for ky in 0..3usize {
                    // y + ky - 1 must land in [0, h)
                    let y_lo = 1usize.saturating_sub(ky);
                    let y_hi = (h + 1).saturating_sub(ky).min(h);
                    for kx in 0..3usize {
                        let kv = kd[k_off + ky * 3 + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        let x_lo = 1usize.saturating_sub(kx);
                        let x_hi = (w + 1).saturating_sub(kx).min(w);
                        for y in y_lo..y_hi {
                            let iy = y + ky - 1;
                            let orow = out_off + y * w;
                            let xrow = x_off + iy * w;
                            for xi in x_lo..x_hi {
                                out[orow + xi] += kv * xd[xrow + xi + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new_unchecked(vec![b, co, h, w], out))
}

fn conv_kernel_grad_eval(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 4 || g.shape().len() != 4 {
        return Err(Error::invalid("conv_kernel_grad expects [B,C,H,W] operands"));
    }
    let (b, ci, h, w) = dims4(x);
    let (bg, co, hg, wg) = dims4(g);
    if bg != b || hg != h || wg != w {
        return Err(Error::shape(
            "conv_kernel_grad spatial dims",
            x.shape(),
            g.shape(),
        ));
    }
    let xd = x.data();
    let gd = g.data();
    let mut out = vec![0.0; co * ci * 9];
    // Batch index ascends outermost inside each cell's accumulator so the
    // result folds samples in the same order as a per-sample loop.
    for o in 0..co {
        for c in 0..ci {
            for ky in 0..3usize {
                let y_lo = 1usize.saturating_sub(ky);
                let y_hi = (h + 1).saturating_sub(ky).min(h);
                for kx in 0..3usize {
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (w + 1).saturating_sub(kx).min(w);
                    let mut acc = 0.0;
                    for bi in 0..b {
                        let g_off = (bi * co + o) * h * w;
                        let x_off = (bi * ci + c) * h * w;
                        // Per-sample partial first, so a batched call folds
                        // samples exactly like summing per-sample results.
                        let mut part = 0.0;
                        for y in y_lo..y_hi {
                            let iy = y + ky - 1;
                            let grow = g_off + y * w;
                            let xrow = x_off + iy * w;
                            for xi in x_lo..x_hi {
                                part += gd[grow + xi] * xd[xrow + xi + kx - 1];
                            }
                        }
                        acc += part;
                    }
                    out[(o * ci + c) * 9 + ky * 3 + kx] = acc;
                }
            }
        }
    }
    Ok(Tensor::new_unchecked(vec![co, ci, 3, 3], out))
}

fn kernel_flip_eval(k: &Tensor) -> Result<Tensor> {
    if k.shape().len() != 4 || k.shape()[2] != 3 || k.shape()[3] != 3 {
        return Err(Error::invalid(format!(
            "kernel_flip expects [Co,Ci,3,3], got {:?}",
            k.shape()
        )));
    }
    let (co, ci) = (k.shape()[0], k.shape()[1]);
    let kd = k.data();
    let mut out = vec![0.0; ci * co * 9];
    for o in 0..co {
        for c in 0..ci {
            for ky in 0..3 {
                for kx in 0..3 {
                    out[(c * co + o) * 9 + ky * 3 + kx] =
                        kd[(o * ci + c) * 9 + (2 - ky) * 3 + (2 - kx)];
                }
            }
        }
    }
    Ok(Tensor::new_unchecked(vec![ci, co, 3, 3], out))
}

fn avg_pool2_eval(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 4 {
        return Err(Error::invalid("avg_pool2 expects [B,C,H,W]"));
    }
    let (b, c, h, w) = dims4(x);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "avg_pool2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; b * c * oh * ow];
    for bc in 0..b * c {
        let src = bc * h * w;
        let dst = bc * oh * ow;
        for y in 0..oh {
            for xi in 0..ow {
                let r0 = src + 2 * y * w + 2 * xi;
                let r1 = r0 + w;
                out[dst + y * ow + xi] = 0.25 * (xd[r0] + xd[r0 + 1] + xd[r1] + xd[r1 + 1]);
            }
        }
    }
    Ok(Tensor::new_unchecked(vec![b, c, oh, ow], out))
}

fn sum_rows_eval(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 {
        return Err(Error::shape("sum_rows input", &[0, 0], x.shape()));
    }
    let (b, k) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let mut out = vec![0.0; k];
    for j in 0..k {
        let mut acc = 0.0;
        for i in 0..b {
            acc += xd[i * k + j];
        }
        out[j] = acc;
    }
    Ok(Tensor::new_unchecked(vec![k], out))
}

fn diff_h_eval(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 4 {
        return Err(Error::invalid("diff_h expects [B,C,H,W]"));
    }
    let (b, c, h, w) = dims4(x);
    if h < 2 {
        return Err(Error::invalid("diff_h needs H >= 2"));
    }
    let xd = x.data();
    let mut out = vec![0.0; b * c * (h - 1) * w];
    for bc in 0..b * c {
        let src = bc * h * w;
        let dst = bc * (h - 1) * w;
        for y in 0..h - 1 {
            for xi in 0..w {
                out[dst + y * w + xi] = xd[src + (y + 1) * w + xi] - xd[src + y * w + xi];
            }
        }
    }
    Ok(Tensor::new_unchecked(vec![b, c, h - 1, w], out))
}

fn diff_h_adj_eval(t: &Tensor) -> Result<Tensor> {
    if t.shape().len() != 4 {
        return Err(Error::invalid("diff_h_adj expects [B,C,H,W]"));
    }
    let (b, c, hm1, w) = dims4(t);
    let h = hm1 + 1;
    let td = t.data();
    let mut out = vec![0.0; b * c * h * w];
    for bc in 0..b * c {
        let src = bc * hm1 * w;
        let dst = bc * h * w;
        for y in 0..h {
            for xi in 0..w {
                let mut v = 0.0;
                if y >= 1 {
                    v += td[src + (y - 1) * w + xi];
                }
                if y < hm1 {
                    v -= td[src + y * w + xi];
                }
                out[dst + y * w + xi] = v;
            }
        }
    }
    Ok(Tensor::new_unchecked(vec![b, c, h, w], out))
}

fn diff_w_eval(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 4 {
        return Err(Error::invalid("diff_w expects [B,C,H,W]"));
    }
    let (b, c, h, w) = dims4(x);
    if w < 2 {
        return Err(Error::invalid("diff_w needs W >= 2"));
    }
    let xd = x.data();
    let mut out = vec![0.0; b * c * h * (w - 1)];
    for bch in 0..b * c * h {
        let src = bch * w;
        let dst = bch * (w - 1);
        for xi in 0..w - 1 {
            out[dst + xi] = xd[src + xi + 1] - xd[src + xi];
        }
    }
    Ok(Tensor::new_unchecked(vec![b, c, h, w - 1], out))
}

fn diff_w_adj_eval(t: &Tensor) -> Result<Tensor> {
    if t.shape().len() != 4 {
        return Err(Error::invalid("diff_w_adj expects [B,C,H,W]"));
    }
    let (b, c, h, wm1) = dims4(t);
    let w = wm1 + 1;
    let td = t.data();
    let mut out = vec![0.0; b * c * h * w];
    for bch in 0..b * c * h {
        let src = bch * wm1;
        let dst = bch * w;
        for xi in 0..w {
            let mut v = 0.0;
            if xi >= 1 {
                v += td[src + xi - 1];
            }
            if xi < wm1 {
                v -= td[src + xi];
            }
            out[dst + xi] = v;
        }
    }
    Ok(Tensor::new_unchecked(vec![b, c, h, w], out))
}
