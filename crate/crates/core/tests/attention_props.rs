mod common;

use common::checks;
use common::randn_like;
use sga_core::attention::{baseline_attention, sga_core as sga, Branch, Side};
use sga_core::diagnostics::capture_branch_gradients;
use sga_core::{BaselineAttentionParams, Ctx, Graph, ParamStore, SgaBlockParams, SgaOptions, Tensor, Var};

const D: usize = 6;

fn weighted_sum(g: &mut Graph, z: Var, seed: u64) -> Var {
    let w = g.constant(randn_like(g.shape(z), seed));
    let p = g.mul(z, w).unwrap();
    g.sum(p)
}

#[test]
fn double_norm_columns_sum_to_one_and_ignore_row_shifts() {
    let r = checks::double_norm_properties(100, 7);
    assert!(r.is_ok(), "{r:?}");
    assert!(checks::double_norm_hand_case().is_ok());
}

#[test]
fn sga_forward_values_do_not_depend_on_the_barrier() {
    let mut store = ParamStore::new();
    let p = SgaBlockParams::init(&mut store, "b", D, &mut common::rng(3));
    let x = randn_like(&[2, 5, D], 1);
    let y = randn_like(&[2, 5, D], 2);
    let run = |stop| {
        let mut g = Graph::new();
        let (xv, yv) = (g.param(x.clone()), g.param(y.clone()));
        let mut cx = Ctx::new(&mut g, &store, true, false);
        let opts = SgaOptions {
            stop_gradient: stop,
            double_norm: true,
        };
        let (z, _) = sga(&mut cx, xv, yv, &p, opts).unwrap();
        g.value(z).clone()
    };
    assert!(run(true).bit_eq(&run(false)));
}

#[test]
fn sga_attention_branches_vanish_only_under_the_barrier() {
    let mut store = ParamStore::new();
    let p = SgaBlockParams::init(&mut store, "b", D, &mut common::rng(4));
    for stop in [true, false] {
        let mut g = Graph::new();
        let x = g.param(randn_like(&[4, D], 5));
        let y = g.param(randn_like(&[4, D], 6));
        let mut cx = Ctx::new(&mut g, &store, true, false);
        let opts = SgaOptions {
            stop_gradient: stop,
            double_norm: true,
        };
        let (z, taps) = sga(&mut cx, x, y, &p, opts).unwrap();
        let loss = weighted_sum(&mut g, z, 9);
        let grads = capture_branch_gradients(&mut g, &taps, loss).unwrap();
        let attn_zero = [Branch::XAttn, Branch::YAttn]
            .iter()
            .all(|b| grads.branch(*b).unwrap().all_zero());
        assert_eq!(attn_zero, stop, "stop_gradient = {stop}");
        assert_eq!(g.has_gradient_path(taps.x, taps.attention_map), !stop);
        assert!(grads.max_residual() < 1e-6, "{}", grads.max_residual());
        if stop {
            // Nothing to split off: each total is its direct branch, bitwise.
            assert!(grads.branch(Branch::XDirect).unwrap().bit_eq(grads.total(Side::X)));
            assert!(grads.branch(Branch::YDirect).unwrap().bit_eq(grads.total(Side::Y)));
        }
    }
}

#[test]
fn baseline_branches_sum_to_the_total() {
    let mut store = ParamStore::new();
    let p = BaselineAttentionParams::init(&mut store, "a", D, &mut common::rng(8));
    for seed in 0..5 {
        let mut g = Graph::new();
        let x = g.param(randn_like(&[2, 4, D], seed));
        let y = g.param(randn_like(&[2, 4, D], seed + 50));
        let mut cx = Ctx::new(&mut g, &store, true, false);
        let (z, taps) = baseline_attention(&mut cx, x, y, &p, false).unwrap();
        let loss = weighted_sum(&mut g, z, seed + 99);
        let grads = capture_branch_gradients(&mut g, &taps, loss).unwrap();
        assert!(grads.max_residual() < 1e-6, "seed {seed}: {}", grads.max_residual());
        for b in Branch::BASELINE {
            assert!(!grads.branch(b).unwrap().all_zero(), "{b}");
        }
        // The skip branch passes the upstream gradient through unchanged.
        g.zero_grad();
        g.backward(loss).unwrap();
        let upstream = g.grad_or_zeros(z);
        assert!(grads.branch(Branch::Skip).unwrap().max_abs_diff(&upstream) == 0.0);
    }
}

#[test]
fn capture_on_a_single_branch_graph_equals_plain_backward() {
    let mut store = ParamStore::new();
    let p = SgaBlockParams::init(&mut store, "b", D, &mut common::rng(10));
    let mut g = Graph::new();
    let x = g.param(randn_like(&[3, D], 11));
    let y = g.param(randn_like(&[3, D], 12));
    let mut cx = Ctx::new(&mut g, &store, true, false);
    let (z, taps) = sga(&mut cx, x, y, &p, SgaOptions::default()).unwrap();
    let loss = weighted_sum(&mut g, z, 13);
    g.backward(loss).unwrap();
    let plain = g.grad_or_zeros(x);
    let grads = capture_branch_gradients(&mut g, &taps, loss).unwrap();
    assert!(grads.total_x.bit_eq(&plain));
}

#[test]
fn stale_taps_are_rejected() {
    let mut store = ParamStore::new();
    let p = SgaBlockParams::init(&mut store, "b", D, &mut common::rng(10));
    let mut g = Graph::new();
    let x = g.param(randn_like(&[3, D], 11));
    let mut cx = Ctx::new(&mut g, &store, true, false);
    let (_, taps) = sga(&mut cx, x, x, &p, SgaOptions::default()).unwrap();
    let mut other = Graph::new();
    let l = other.param(Tensor::scalar(1.0));
    assert!(capture_branch_gradients(&mut other, &taps, l).is_err());
}

#[test]
fn stop_gradient_variants_are_exact_in_the_full_model() {
    for v in [sga_core::Variant::Sga, sga_core::Variant::BaselineStopGrad] {
        let r = checks::stop_grad_exactness(v, 21);
        assert!(r.is_ok(), "{r:?}");
    }
}

#[test]
fn gradients_are_linear_in_the_loss() {
    let mut store = ParamStore::new();
    let p = SgaBlockParams::init(&mut store, "b", D, &mut common::rng(30));
    let mut g = Graph::new();
    let x = g.param(randn_like(&[5, D], 31));
    let mut cx = Ctx::new(&mut g, &store, true, false);
    let (z, _) = sga(&mut cx, x, x, &p, SgaOptions::default()).unwrap();
    let l1 = weighted_sum(&mut g, z, 32);
    let sq = g.square(z);
    let l2 = g.mean(sq);
    let (a, b) = (0.7f32, -1.3f32);
    let grad = |g: &mut Graph, l| {
        g.zero_grad();
        g.backward(l).unwrap();
        g.grad_or_zeros(x)
    };
    let g1 = grad(&mut g, l1);
    let g2 = grad(&mut g, l2);
    let s1 = g.scale(l1, a);
    let s2 = g.scale(l2, b);
    let comb = g.add(s1, s2).unwrap();
    let gc = grad(&mut g, comb);
    for i in 0..gc.numel() {
        let lin = a * g1.data()[i] + b * g2.data()[i];
        assert!((gc.data()[i] - lin).abs() < 1e-6);
    }
}
