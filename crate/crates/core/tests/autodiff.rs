//! Oracle tests for the tape.
//!
//! Three independent sources of truth are used:
//! * central finite differences of the forward evaluation, per op;
//! * adjoint identities `<A x, y> == <x, A* y>` for every linear op pair,
//!   which pin the hand-derived convolution gradient formulas;
//! * a second-order check where finite differences are taken over the
//!   *first* backward pass's values, so the differentiable-backward claim is
//!   tested without trusting it.

use gilab_core::rng::Rng;
use gilab_core::tape::{Tape, VarId};
use gilab_core::tensor::Tensor;
use std::sync::Arc;

type Build = dyn Fn(&mut Tape, VarId) -> VarId;

/// Weights the op output by a fixed pseudo-random constant and sums, so
/// every output coordinate influences the scalar differently.
fn weighted_sum(tape: &mut Tape, y: VarId, seed: u64) -> VarId {
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut Rng::new(seed)));
    let prod = tape.mul(y, w).unwrap();
    tape.sum_all(prod).unwrap()
}

/// Compares reverse-mode gradients of `build`'s scalar output against
/// central finite differences at every coordinate of `x`.
fn check_grad(x: &Tensor, build: &Build) {
    let eval = |t: &Tensor| -> f64 {
        let mut tape = Tape::new();
        let xv = tape.leaf(t.clone(), true);
        let loss = build(&mut tape, xv);
        tape.value(loss).data()[0]
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = build(&mut tape, xv);
    let grads = tape.backward(loss, &[xv]).unwrap();
    let analytic = tape.value(grads[0].expect("connected")).clone();
    assert_eq!(analytic.shape(), x.shape());

    let eps = 1e-6;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let fp = eval(&Tensor::new_unchecked(x.shape().to_vec(), plus));
        let fm = eval(&Tensor::new_unchecked(x.shape().to_vec(), minus));
        let num = (fp - fm) / (2.0 * eps);
        let ana = analytic.data()[i];
        let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-8);
        assert!(rel < 1e-5, "coord {i}: numeric {num} vs analytic {ana} (rel {rel})");
    }
}

fn t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut Rng::new(seed))
}

fn t_pos(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 0.3, 1.3, &mut Rng::new(seed))
}

#[test]
fn fd_elementwise_binary_ops() {
    let other = t(&[2, 3], 100);
    for (name, f) in [
        ("add", (|tp: &mut Tape, a, b| tp.add(a, b).unwrap()) as fn(&mut Tape, VarId, VarId) -> VarId),
        ("sub", |tp, a, b| tp.sub(a, b).unwrap()),
        ("mul", |tp, a, b| tp.mul(a, b).unwrap()),
    ] {
        // gradient with respect to the left operand
        let o = other.clone();
        check_grad(&t(&[2, 3], 1), &move |tp, x| {
            let c = tp.constant(o.clone());
            let y = f(tp, x, c);
            weighted_sum(tp, y, 7)
        });
        // and the right operand
        let o = other.clone();
        check_grad(&t(&[2, 3], 2), &move |tp, x| {
            let c = tp.constant(o.clone());
            let y = f(tp, c, x);
            weighted_sum(tp, y, 8)
        });
        let _ = name;
    }
}

#[test]
fn fd_div_both_operands() {
    let denom = t_pos(&[2, 3], 101);
    let d = denom.clone();
    check_grad(&t(&[2, 3], 3), &move |tp, x| {
        let c = tp.constant(d.clone());
        let y = tp.div(x, c).unwrap();
        weighted_sum(tp, y, 9)
    });
    let numer = t(&[2, 3], 102);
    check_grad(&t_pos(&[2, 3], 4), &move |tp, x| {
        let c = tp.constant(numer.clone());
        let y = tp.div(c, x).unwrap();
        weighted_sum(tp, y, 10)
    });
}

#[test]
fn fd_affine_and_unary_smooth_ops() {
    check_grad(&t(&[3, 2], 5), &|tp, x| {
        let y = tp.affine(x, -2.5, 0.75).unwrap();
        weighted_sum(tp, y, 11)
    });
    check_grad(&t(&[2, 3], 6), &|tp, x| {
        let y = tp.exp(x).unwrap();
        weighted_sum(tp, y, 12)
    });
    check_grad(&t_pos(&[2, 3], 7), &|tp, x| {
        let y = tp.log(x).unwrap();
        weighted_sum(tp, y, 13)
    });
    check_grad(&t_pos(&[2, 3], 8), &|tp, x| {
        let y = tp.sqrt(x).unwrap();
        weighted_sum(tp, y, 14)
    });
}

#[test]
fn fd_relu_and_abs_away_from_kinks() {
    // Inputs bounded away from zero so the finite difference never crosses
    // the kink; the a.e. derivative is exact there.
    let mut x = t(&[3, 4], 9);
    x = x.map(|v| if v.abs() < 0.2 { v.signum() * 0.2 + v } else { v });
    check_grad(&x, &|tp, xv| {
        let y = tp.relu(xv).unwrap();
        weighted_sum(tp, y, 15)
    });
    check_grad(&x, &|tp, xv| {
        let y = tp.abs(xv).unwrap();
        weighted_sum(tp, y, 16)
    });
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap(), true);
    let y = tape.relu(x).unwrap();
    let loss = tape.sum_all(y).unwrap();
    let g = tape.backward(loss, &[x]).unwrap()[0].unwrap();
    assert_eq!(tape.value(g).data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn fd_matmul_all_transpose_combinations() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a_shape = if ta { [4, 3] } else { [3, 4] };
        let b_shape = if tb { [5, 4] } else { [4, 5] };
        let b_const = t(&b_shape, 200);
        let bc = b_const.clone();
        check_grad(&t(&a_shape, 10), &move |tp, x| {
            let c = tp.constant(bc.clone());
            let y = tp.matmul(x, c, ta, tb).unwrap();
            weighted_sum(tp, y, 17)
        });
        let a_const = t(&a_shape, 201);
        check_grad(&t(&b_shape, 11), &move |tp, x| {
            let c = tp.constant(a_const.clone());
            let y = tp.matmul(c, x, ta, tb).unwrap();
            weighted_sum(tp, y, 18)
        });
    }
}

#[test]
fn fd_conv2d_both_operands() {
    let kernel = t(&[3, 2, 3, 3], 202);
    let k = kernel.clone();
    check_grad(&t(&[2, 2, 4, 5], 12), &move |tp, x| {
        let c = tp.constant(k.clone());
        let y = tp.conv2d(x, c).unwrap();
        weighted_sum(tp, y, 19)
    });
    let image = t(&[2, 2, 4, 5], 203);
    check_grad(&t(&[3, 2, 3, 3], 13), &move |tp, x| {
        let c = tp.constant(image.clone());
        let y = tp.conv2d(c, x).unwrap();
        weighted_sum(tp, y, 20)
    });
}

#[test]
fn fd_conv_kernel_grad_both_operands() {
    let g = t(&[2, 3, 4, 4], 204);
    let gc = g.clone();
    check_grad(&t(&[2, 2, 4, 4], 14), &move |tp, x| {
        let c = tp.constant(gc.clone());
        let y = tp.conv_kernel_grad(x, c).unwrap();
        weighted_sum(tp, y, 21)
    });
    let image = t(&[2, 2, 4, 4], 205);
    check_grad(&t(&[2, 3, 4, 4], 15), &move |tp, x| {
        let c = tp.constant(image.clone());
        let y = tp.conv_kernel_grad(c, x).unwrap();
        weighted_sum(tp, y, 22)
    });
}

#[test]
fn fd_structural_ops() {
    check_grad(&t(&[2, 3, 3, 3], 16), &|tp, x| {
        let y = tp.kernel_flip(x).unwrap();
        weighted_sum(tp, y, 23)
    });
    check_grad(&t(&[2, 2, 4, 6], 17), &|tp, x| {
        let y = tp.avg_pool2(x).unwrap();
        weighted_sum(tp, y, 24)
    });
    check_grad(&t(&[2, 2, 3, 2], 18), &|tp, x| {
        let y = tp.upsample2(x).unwrap();
        weighted_sum(tp, y, 25)
    });
    check_grad(&t(&[2, 6], 19), &|tp, x| {
        let y = tp.reshape(x, &[3, 4]).unwrap();
        weighted_sum(tp, y, 26)
    });
    check_grad(&t(&[2, 2, 3, 4], 20), &|tp, x| {
        let y = tp.diff_h(x).unwrap();
        weighted_sum(tp, y, 27)
    });
    check_grad(&t(&[2, 2, 3, 4], 21), &|tp, x| {
        let y = tp.diff_w(x).unwrap();
        weighted_sum(tp, y, 28)
    });
    check_grad(&t(&[2, 2, 2, 4], 22), &|tp, x| {
        let y = tp.diff_h_adj(x).unwrap();
        weighted_sum(tp, y, 29)
    });
    check_grad(&t(&[2, 2, 3, 3], 23), &|tp, x| {
        let y = tp.diff_w_adj(x).unwrap();
        weighted_sum(tp, y, 30)
    });
}

#[test]
fn fd_reduction_and_broadcast_ops() {
    check_grad(&t(&[3, 4], 24), &|tp, x| {
        let y = tp.sum_all(x).unwrap();
        weighted_sum(tp, y, 31)
    });
    check_grad(&t(&[1], 25), &|tp, x| {
        let y = tp.bcast_all(x, &[2, 3]).unwrap();
        weighted_sum(tp, y, 32)
    });
    check_grad(&t(&[3, 4], 26), &|tp, x| {
        let y = tp.sum_rows(x).unwrap();
        weighted_sum(tp, y, 33)
    });
    check_grad(&t(&[4], 27), &|tp, x| {
        let y = tp.bcast_rows(x, 3).unwrap();
        weighted_sum(tp, y, 34)
    });
    check_grad(&t(&[3, 4], 28), &|tp, x| {
        let y = tp.row_sum(x).unwrap();
        weighted_sum(tp, y, 35)
    });
    check_grad(&t(&[3], 29), &|tp, x| {
        let y = tp.bcast_cols(x, 5).unwrap();
        weighted_sum(tp, y, 36)
    });
    check_grad(&t(&[2, 3, 2, 2], 30), &|tp, x| {
        let y = tp.sum_chan(x).unwrap();
        weighted_sum(tp, y, 37)
    });
    check_grad(&t(&[3], 31), &|tp, x| {
        let y = tp.bcast_chan(x, 2, 2, 2).unwrap();
        weighted_sum(tp, y, 38)
    });
}

#[test]
fn fd_gather_scatter_take_put() {
    let labels = Arc::new(vec![2usize, 0, 1]);
    let l = labels.clone();
    check_grad(&t(&[3, 4], 32), &move |tp, x| {
        let y = tp.gather_cols(x, l.clone()).unwrap();
        weighted_sum(tp, y, 39)
    });
    let l = labels.clone();
    check_grad(&t(&[3], 33), &move |tp, x| {
        let y = tp.scatter_cols(x, l.clone(), 4).unwrap();
        weighted_sum(tp, y, 40)
    });
    // duplicate rows exercise the scatter-add in the adjoint
    let rows = Arc::new(vec![1usize, 1, 0, 2]);
    let r = rows.clone();
    check_grad(&t(&[3, 2, 2], 34), &move |tp, x| {
        let y = tp.take_rows(x, r.clone()).unwrap();
        weighted_sum(tp, y, 41)
    });
    let r = rows.clone();
    check_grad(&t(&[4, 2], 35), &move |tp, x| {
        let y = tp.put_rows(x, r.clone(), 3).unwrap();
        weighted_sum(tp, y, 42)
    });
}

/// `<A x, y> == <x, A* y>` for the linear op pairs whose adjoints were
/// derived by hand. Exactness here is what makes the backward rules for
/// convolution trustworthy.
#[test]
fn adjoint_identities() {
    let tol = 1e-12;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-12);

    for seed in 0..5u64 {
        // conv2d: image side
        let x = t(&[2, 3, 5, 4], seed * 10 + 1);
        let k = t(&[4, 3, 3, 3], seed * 10 + 2);
        let y = t(&[2, 4, 5, 4], seed * 10 + 3);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let kv = tape.constant(k.clone());
        let yv = tape.constant(y.clone());
        let ax = tape.conv2d(xv, kv).unwrap();
        let lhs = tape.value(ax).dot(&y).unwrap();
        let kf = tape.kernel_flip(kv).unwrap();
        let aty = tape.conv2d(yv, kf).unwrap();
        let rhs = tape.value(aty).dot(&x).unwrap();
        assert!(rel(lhs, rhs) < tol, "conv2d/x adjoint: {lhs} vs {rhs}");

        // conv2d: kernel side, against conv_kernel_grad
        let ckg = tape.conv_kernel_grad(xv, yv).unwrap();
        let rhs_k = tape.value(ckg).dot(&k).unwrap();
        assert!(rel(lhs, rhs_k) < tol, "conv2d/k adjoint: {lhs} vs {rhs_k}");

        // kernel_flip is its own adjoint and an involution
        let u = t(&[3, 4, 3, 3], seed * 10 + 4);
        let uv = tape.constant(u.clone());
        let fk = tape.kernel_flip(kv).unwrap();
        let lhs_f = tape.value(fk).dot(&u).unwrap();
        let fu = tape.kernel_flip(uv).unwrap();
        let rhs_f = tape.value(fu).dot(&k).unwrap();
        assert!(rel(lhs_f, rhs_f) < tol, "kernel_flip adjoint");
        let ff = tape.kernel_flip(fk).unwrap();
        assert_eq!(tape.value(ff), &k, "kernel_flip involution");

        // pooling pair: <pool(x), y> == <x, 0.25 * up(y)>
        let px = t(&[2, 2, 4, 6], seed * 10 + 5);
        let py = t(&[2, 2, 2, 3], seed * 10 + 6);
        let pxv = tape.constant(px.clone());
        let pyv = tape.constant(py.clone());
        let pooled = tape.avg_pool2(pxv).unwrap();
        let lhs_p = tape.value(pooled).dot(&py).unwrap();
        let up = tape.upsample2(pyv).unwrap();
        let rhs_p = 0.25 * tape.value(up).dot(&px).unwrap();
        assert!(rel(lhs_p, rhs_p) < tol, "pool adjoint");

        // difference ops
        let dx = t(&[1, 2, 5, 4], seed * 10 + 7);
        let dy = t(&[1, 2, 4, 4], seed * 10 + 8);
        let dxv = tape.constant(dx.clone());
        let dyv = tape.constant(dy.clone());
        let d = tape.diff_h(dxv).unwrap();
        let lhs_d = tape.value(d).dot(&dy).unwrap();
        let da = tape.diff_h_adj(dyv).unwrap();
        let rhs_d = tape.value(da).dot(&dx).unwrap();
        assert!(rel(lhs_d, rhs_d) < tol, "diff_h adjoint");

        let wx = t(&[1, 2, 4, 5], seed * 10 + 9);
        let wy = t(&[1, 2, 4, 4], seed * 10 + 10);
        let wxv = tape.constant(wx.clone());
        let wyv = tape.constant(wy.clone());
        let dw = tape.diff_w(wxv).unwrap();
        let lhs_w = tape.value(dw).dot(&wy).unwrap();
        let dwa = tape.diff_w_adj(wyv).unwrap();
        let rhs_w = tape.value(dwa).dot(&wx).unwrap();
        assert!(rel(lhs_w, rhs_w) < tol, "diff_w adjoint");

        // take/put with duplicates
        let idx = Arc::new(vec![0usize, 2, 2, 1]);
        let tx = t(&[3, 4], seed * 10 + 11);
        let ty = t(&[4, 4], seed * 10 + 12);
        let txv = tape.constant(tx.clone());
        let tyv = tape.constant(ty.clone());
        let taken = tape.take_rows(txv, idx.clone()).unwrap();
        let lhs_t = tape.value(taken).dot(&ty).unwrap();
        let put = tape.put_rows(tyv, idx.clone(), 3).unwrap();
        let rhs_t = tape.value(put).dot(&tx).unwrap();
        assert!(rel(lhs_t, rhs_t) < tol, "take/put adjoint");
    }
}

/// Second-order oracle. L2(x) = sum(w * g(x)^2) where g = dL1/dx is produced
/// by the first backward pass. The analytic dL2/dx uses backward-of-backward;
/// the numeric side finite-differences over *values* of g computed on fresh
/// tapes, so it never trusts the second sweep.
#[test]
fn second_order_gradients_match_finite_differences() {
    let w_img = t(&[2, 2, 3, 3], 300); // conv kernel
    let w_fc = t(&[8, 3], 301);
    let weight = t_pos(&[2, 2, 4, 4], 302); // x-shaped, weights g = dL1/dx
    let labels = Arc::new(vec![1usize, 2]);

    // returns (L1 node, x leaf) on a fresh tape
    let build_l1 = |tape: &mut Tape, xt: &Tensor| -> (VarId, VarId) {
        let x = tape.leaf(xt.clone(), true);
        let k = tape.constant(w_img.clone());
        let f = tape.constant(w_fc.clone());
        let c1 = tape.conv2d(x, k).unwrap();
        let p = tape.avg_pool2(c1).unwrap();
        let flat = tape.reshape(p, &[2, 8]).unwrap();
        let logits = tape.matmul(flat, f, false, false).unwrap();
        let e = tape.exp(logits).unwrap();
        let s = tape.row_sum(e).unwrap();
        let ls = tape.log(s).unwrap();
        let picked = tape.gather_cols(logits, labels.clone()).unwrap();
        let per = tape.sub(ls, picked).unwrap();
        let l1 = tape.sum_all(per).unwrap();
        (l1, x)
    };

    let first_grad_values = |xt: &Tensor| -> Tensor {
        let mut tape = Tape::new();
        let (l1, x) = build_l1(&mut tape, xt);
        let g = tape.backward(l1, &[x]).unwrap()[0].unwrap();
        tape.value(g).clone()
    };

    let l2_value = |xt: &Tensor| -> f64 {
        let g = first_grad_values(xt);
        g.data()
            .iter()
            .zip(weight.data())
            .map(|(gi, wi)| wi * gi * gi)
            .sum()
    };

    let x0 = t_pos(&[2, 2, 4, 4], 303);

    // analytic second-order gradient
    let mut tape = Tape::new();
    let (l1, x) = build_l1(&mut tape, &x0);
    let g = tape.backward(l1, &[x]).unwrap()[0].unwrap();
    let wv = tape.constant(weight.clone());
    let g2 = tape.mul(g, g).unwrap();
    let wg2 = tape.mul(wv, g2).unwrap();
    let l2 = tape.sum_all(wg2).unwrap();
    let d2 = tape.backward(l2, &[x]).unwrap()[0].unwrap();
    let analytic = tape.value(d2).clone();

    let eps = 1e-6;
    for i in 0..x0.numel() {
        let mut plus = x0.data().to_vec();
        plus[i] += eps;
        let mut minus = x0.data().to_vec();
        minus[i] -= eps;
        let fp = l2_value(&Tensor::new_unchecked(x0.shape().to_vec(), plus));
        let fm = l2_value(&Tensor::new_unchecked(x0.shape().to_vec(), minus));
        let num = (fp - fm) / (2.0 * eps);
        let ana = analytic.data()[i];
        let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
        assert!(rel < 1e-4, "coord {i}: numeric {num} vs analytic {ana} (rel {rel})");
    }
}

#[test]
fn backward_requires_scalar_root_and_handles_disconnection() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2, 2], 40), true);
    let y = tape.leaf(t(&[2, 2], 41), true);
    let s = tape.sum_all(x).unwrap();
    assert!(tape.backward(x, &[x]).is_err(), "non-scalar root must fail");
    let grads = tape.backward(s, &[x, y]).unwrap();
    assert!(grads[0].is_some());
    assert!(grads[1].is_none(), "disconnected target has no gradient");
}

#[test]
fn backward_is_deterministic() {
    let run = || -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3, 4, 4], 42), true);
        let k = tape.leaf(t(&[2, 3, 3, 3], 43), true);
        let c = tape.conv2d(x, k).unwrap();
        let r = tape.relu(c).unwrap();
        let loss = weighted_sum(&mut tape, r, 44);
        let g = tape.backward(loss, &[x, k]).unwrap();
        let mut out = tape.value(g[0].unwrap()).data().to_vec();
        out.extend_from_slice(tape.value(g[1].unwrap()).data());
        out
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    assert!(a.iter().all(|v| v.is_finite()));
}

#[test]
fn shared_subexpression_gradients_accumulate() {
    // f(x) = sum(x*x) + sum(x) consumes x twice; df/dx = 2x + 1.
    let x0 = t(&[3], 50);
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let sq = tape.mul(x, x).unwrap();
    let s1 = tape.sum_all(sq).unwrap();
    let s2 = tape.sum_all(x).unwrap();
    let loss = tape.add(s1, s2).unwrap();
    let g = tape.backward(loss, &[x]).unwrap()[0].unwrap();
    let gv = tape.value(g);
    for (gi, xi) in gv.data().iter().zip(x0.data()) {
        assert!((gi - (2.0 * xi + 1.0)).abs() < 1e-12);
    }
}
