//! Central finite-difference oracle.
//!
//! The probe loss is `sum_i w_i * y_i` for fixed random weights `w`,
//! accumulated in f64. Only the tape gradients come from the engine; the
//! numeric side re-runs the forward on an inference graph.

use rand::Rng;
use sga_core::{Graph, Result, Tensor, Var};

pub const EPS: f32 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Relative error with a unit floor on the denominator so that entries whose
/// true gradient is near zero are judged on absolute error instead.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn probe(y: &Tensor, w: &[f64]) -> f64 {
    y.data().iter().zip(w).map(|(&v, &k)| v as f64 * k).sum()
}

/// Compares tape gradients of every input against central differences.
/// `f` maps the input variables to an output of any shape.
pub fn check<F>(inputs: &[Tensor], seed: u64, f: F) -> GradCheck
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    // analytic
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = f(&mut g, &vars).expect("forward");
    let shape = g.shape(y).to_vec();
    let mut r = super::rng(seed ^ 0x5eed);
    let w: Vec<f64> = (0..g.value(y).numel())
        .map(|_| r.random_range(-1.0..1.0))
        .collect();
    let wt = Tensor::new(&shape, w.iter().map(|&v| v as f32).collect()).unwrap();
    let wv = g.constant(wt);
    let prod = g.mul(y, wv).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::inference();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let y = f(&mut g, &vars).expect("forward");
        probe(g.value(y), &w)
    };

    let mut out = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut xs = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        for j in 0..xs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + EPS;
            let plus = eval(&xs);
            xs[i].data_mut()[j] = orig - EPS;
            let minus = eval(&xs);
            xs[i].data_mut()[j] = orig;
            let h = (orig + EPS) as f64 - (orig - EPS) as f64;
            let numeric = (plus - minus) / h;
            let an = a.data()[j] as f64;
            out.max_rel_err = out.max_rel_err.max(rel_err(an, numeric));
            out.max_abs_err = out.max_abs_err.max((an - numeric).abs());
            out.checked += 1;
        }
    }
    out
}
