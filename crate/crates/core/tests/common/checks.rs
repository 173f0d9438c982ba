//! Checks shared by the focused suites and the acceptance run. Each returns
//! a short summary on success and a reason on failure.

use super::rng;
use rand::Rng;
use sga_core::attention::{Branch, Side};
use sga_core::diagnostics::capture_branch_gradients;
use sga_core::model::{Batch, LossTerm, TrainState};
use sga_core::{Graph, Tensor, TrainingConfig, Variant};

pub type Check = std::result::Result<String, String>;

fn fail<T>(msg: impl Into<String>) -> std::result::Result<T, String> {
    Err(msg.into())
}

/// Row softmax then column L1 normalization, on an inference graph.
pub fn double_norm(logits: &Tensor) -> (Tensor, Tensor) {
    let mut g = Graph::inference();
    let x = g.constant(logits.clone());
    let s = g.softmax_rows(x).unwrap();
    let n = g.l1_normalize_columns(s).unwrap();
    (g.value(s).clone(), g.value(n).clone())
}

fn col_sums(t: &Tensor) -> Vec<f64> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..c).map(|j| (0..r).map(|i| t.data()[i * c + j] as f64).sum()).collect()
}

/// Column sums, range and per-row shift invariance over random matrices.
pub fn double_norm_properties(count: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let mut worst_sum = 0f64;
    let mut worst_shift = 0f32;
    for k in 0..count {
        let (n, m) = (r.random_range(1..12), r.random_range(1..12));
        let scale = r.random_range(0.1f32..4.0);
        let data: Vec<f32> = (0..n * m).map(|_| r.random_range(-scale..scale)).collect();
        let logits = Tensor::new(&[n, m], data).unwrap();
        let (soft, hat) = double_norm(&logits);
        for s in col_sums(&hat) {
            worst_sum = worst_sum.max((s - 1.0).abs());
        }
        if hat.data().iter().any(|&v| !(0.0..=1.0 + 1e-6).contains(&v)) {
            return fail(format!("matrix {k}: entry outside [0, 1]"));
        }
        let shifts: Vec<f32> = (0..n).map(|_| r.random_range(-5.0f32..5.0)).collect();
        let mut shifted = logits.clone();
        for (i, row) in shifted.data_mut().chunks_mut(m).enumerate() {
            row.iter_mut().for_each(|v| *v += shifts[i]);
        }
        let (soft2, hat2) = double_norm(&shifted);
        worst_shift = worst_shift.max(soft.max_abs_diff(&soft2)).max(hat.max_abs_diff(&hat2));
    }
    if worst_sum > 1e-6 {
        return fail(format!("column sum off by {worst_sum:.2e}"));
    }
    if worst_shift > 1e-6 {
        return fail(format!("row shift changed the map by {worst_shift:.2e}"));
    }
    Ok(format!("{count} matrices, max |colsum-1| {worst_sum:.1e}, max shift drift {worst_shift:.1e}"))
}

/// Logits `[[ln 2, 0], [0, 0]]`: softmax rows `[2/3, 1/3]`, `[1/2, 1/2]`;
/// column sums `7/6`, `5/6`.
pub fn double_norm_hand_case() -> Check {
    let logits = Tensor::from_rows(&[&[2f32.ln(), 0.0], &[0.0, 0.0]]).unwrap();
    let (_, hat) = double_norm(&logits);
    let expect = [4.0 / 7.0, 0.4, 3.0 / 7.0, 0.6];
    let err = hat
        .data()
        .iter()
        .zip(expect)
        .map(|(&a, b)| (a as f64 - b).abs())
        .fold(0.0, f64::max);
    if err > 1e-6 {
        return fail(format!("hand case off by {err:.2e}: {:?}", hat.data()));
    }
    Ok(format!("2x2 hand case within {err:.1e}"))
}

/// A small model so the gradient checks stay quick.
pub fn small_config(variant: Variant, seed: u64) -> TrainingConfig {
    TrainingConfig {
        variant,
        seed,
        batch_size: 2,
        resolution: 32,
        enc_channels: vec![8, 16, 32],
        disc_channels: vec![8, 16],
        res_blocks: 1,
        ..TrainingConfig::default()
    }
}

pub fn batch_for(cfg: &TrainingConfig, seed: u64) -> Batch {
    let tcfg = cfg.triple_config();
    let triples: Vec<_> = (0..cfg.batch_size)
        .map(|i| {
            let img = super::synthetic_image(seed + i as u64, cfg.resolution, cfg.resolution);
            sga_core::data::make_triple(&img, seed * 31 + i as u64, &tcfg).unwrap()
        })
        .collect();
    Batch::from_triples(&triples).unwrap()
}

fn add_into(acc: &mut Tensor, t: &Tensor) {
    acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
}

/// For a stop-gradient variant: the map has no gradient edges back to its
/// inputs, the branches through it carry exactly zero gradient under every
/// loss term, and the per-term input gradients add up to the full one.
pub fn stop_grad_exactness(variant: Variant, seed: u64) -> Check {
    let cfg = small_config(variant, seed);
    let state = TrainState::new(cfg.clone()).map_err(|e| e.to_string())?;
    let batch = batch_for(&cfg, seed);
    let mut pass = state.generator_pass(&batch, true).map_err(|e| e.to_string())?;
    let g = &mut pass.graph;
    let taps = pass.output.taps.clone();
    for (i, t) in taps.iter().enumerate() {
        if g.requires_grad(t.attention_map) || g.has_gradient_path(t.x, t.attention_map) || g.has_gradient_path(t.y, t.attention_map) {
            return fail(format!("attention map {i} has a gradient path"));
        }
    }
    let mut sums: Vec<[Tensor; 2]> = taps
        .iter()
        .map(|t| [Tensor::zeros(g.shape(t.x)), Tensor::zeros(g.shape(t.y))])
        .collect();
    let mut full = Vec::new();
    let mut checked = 0;
    for term in LossTerm::EACH.into_iter().chain([LossTerm::All]) {
        let loss = state.loss_term(g, &pass.losses, term);
        for (i, t) in taps.iter().enumerate() {
            let grads = capture_branch_gradients(g, t, loss).map_err(|e| e.to_string())?;
            for (b, gr) in &grads.branches {
                if b.through_attention_map() && !gr.all_zero() {
                    return fail(format!("{b}@{} carries gradient on tap set {i}", term.label()));
                }
                checked += 1;
            }
            if term == LossTerm::All {
                full.push(grads);
            } else {
                add_into(&mut sums[i][0], grads.total(Side::X));
                add_into(&mut sums[i][1], grads.total(Side::Y));
            }
        }
    }
    let mut worst = 0f32;
    for (s, f) in sums.iter().zip(&full) {
        worst = worst.max(s[0].max_abs_diff(&f.total_x)).max(s[1].max_abs_diff(&f.total_y));
    }
    if worst > 1e-6 {
        return fail(format!("per-term gradients sum off the full gradient by {worst:.2e}"));
    }
    if variant.is_baseline() {
        pass.graph.zero_grad();
        pass.graph.backward(pass.losses.total).map_err(|e| e.to_string())?;
        let grads = pass.binding.grads(&pass.graph, &state.generator.params);
        for (e, gr) in state.generator.params.entries().iter().zip(&grads) {
            let is_qk = e.name.ends_with("w_q") || e.name.ends_with("w_k");
            if is_qk && !gr.as_ref().is_some_and(|t| t.all_zero()) {
                return fail(format!("{} received gradient", e.name));
            }
        }
    }
    Ok(format!(
        "{}: {checked} attention-map branch gradients exactly zero, additivity within {worst:.1e}",
        variant.label()
    ))
}

/// Sum of branch gradients against the total gradient of each input.
pub fn decomposition_residual(state: &TrainState, batch: &Batch) -> std::result::Result<f32, String> {
    let mut pass = state.generator_pass(batch, true).map_err(|e| e.to_string())?;
    let taps = pass.output.taps[0].clone();
    let loss = pass.losses.total;
    let grads = capture_branch_gradients(&mut pass.graph, &taps, loss).map_err(|e| e.to_string())?;
    let nonzero = [Branch::Q, Branch::K, Branch::XAttn, Branch::YAttn]
        .iter()
        .filter_map(|b| grads.branch(*b))
        .any(|t| !t.all_zero());
    if !nonzero {
        return fail("attention-map branches are all zero; nothing to decompose");
    }
    Ok(grads.max_residual())
}
