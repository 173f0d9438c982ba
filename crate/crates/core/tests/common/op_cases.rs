//! Every differentiable op, as small finite-difference cases.

use super::randn_like;
use sga_core::autodiff::BatchNormMode;
use sga_core::{Graph, Result, Tensor, Var};

pub const TOL: f64 = 1e-3;
pub const CONV_TOL: f64 = 1e-2;

type Make = Box<dyn Fn(u64) -> Vec<Tensor> + Sync>;
type Forward = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + Sync>;

pub struct OpCase {
    pub name: String,
    pub tol: f64,
    pub make: Make,
    pub f: Forward,
}

fn case(
    name: impl Into<String>,
    tol: f64,
    make: impl Fn(u64) -> Vec<Tensor> + Sync + 'static,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + Sync + 'static,
) -> OpCase {
    OpCase {
        name: name.into(),
        tol,
        make: Box::new(make),
        f: Box::new(f),
    }
}

/// Values bounded away from zero, for ops with a kink at the origin.
pub fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    randn_like(shape, seed).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

pub fn positive(shape: &[usize], seed: u64) -> Tensor {
    randn_like(shape, seed).map(|v| v.abs() + 0.2)
}

pub fn all() -> Vec<OpCase> {
    let mut v = vec![
        case("matmul", TOL, |s| vec![randn_like(&[3, 4], s), randn_like(&[4, 2], s + 100)], |g, v| {
            g.matmul(v[0], v[1])
        }),
        case("bmm", TOL, |s| vec![randn_like(&[2, 3, 4], s), randn_like(&[2, 4, 5], s + 100)], |g, v| {
            g.matmul(v[0], v[1])
        }),
        case("add", TOL, |s| vec![randn_like(&[2, 5], s), randn_like(&[2, 5], s + 7)], |g, v| g.add(v[0], v[1])),
        case("sub", TOL, |s| vec![randn_like(&[2, 5], s), randn_like(&[2, 5], s + 7)], |g, v| g.sub(v[0], v[1])),
        case("mul", TOL, |s| vec![randn_like(&[2, 5], s), randn_like(&[2, 5], s + 7)], |g, v| g.mul(v[0], v[1])),
        case("scale", TOL, |s| vec![randn_like(&[6], s)], |g, v| Ok(g.scale(v[0], -2.5))),
        case("add_scalar", TOL, |s| vec![randn_like(&[6], s)], |g, v| Ok(g.add_scalar(v[0], 0.7))),
        case("tanh", TOL, |s| vec![randn_like(&[7], s)], |g, v| Ok(g.tanh(v[0]))),
        case("square", TOL, |s| vec![randn_like(&[7], s)], |g, v| Ok(g.square(v[0]))),
        case("abs", TOL, |s| vec![away_from_zero(&[7], s)], |g, v| Ok(g.abs(v[0]))),
        case("leaky_relu", TOL, |s| vec![away_from_zero(&[3, 4], s)], |g, v| g.leaky_relu(v[0], 0.2)),
        case("sum", TOL, |s| vec![randn_like(&[3, 3], s)], |g, v| Ok(g.sum(v[0]))),
        case("mean", TOL, |s| vec![randn_like(&[3, 3], s)], |g, v| Ok(g.mean(v[0]))),
        case(
            "l1_loss",
            TOL,
            |s| vec![away_from_zero(&[2, 3], s), Tensor::zeros(&[2, 3])],
            |g, v| g.l1_loss(v[0], v[1]),
        ),
        case(
            "mse_loss",
            TOL,
            |s| vec![randn_like(&[2, 3], s), randn_like(&[2, 3], s + 3)],
            |g, v| g.mse_loss(v[0], v[1]),
        ),
        case("transpose", TOL, |s| vec![randn_like(&[2, 3, 4], s)], |g, v| g.transpose(v[0])),
        case("reshape", TOL, |s| vec![randn_like(&[2, 6], s)], |g, v| g.reshape(v[0], &[3, 4])),
        case(
            "concat_channels",
            TOL,
            |s| vec![randn_like(&[2, 1, 2, 2], s), randn_like(&[2, 3, 2, 2], s + 9)],
            |g, v| g.concat(&[v[0], v[1]], 1),
        ),
        case("upsample", TOL, |s| vec![randn_like(&[1, 2, 2, 3], s)], |g, v| g.upsample_nearest2d(v[0], 2)),
        case("softmax_rows", TOL, |s| vec![randn_like(&[3, 4], s)], |g, v| g.softmax_rows(v[0])),
        case("l1_normalize_columns", TOL, |s| vec![positive(&[2, 3, 4], s)], |g, v| {
            g.l1_normalize_columns(v[0])
        }),
        case("l1_normalize_columns_clamped", TOL, |s| vec![positive(&[3, 4], s)], |g, v| {
            g.l1_normalize_columns_clamped(v[0], 1e-12)
        }),
        case("double_norm", TOL, |s| vec![randn_like(&[4, 4], s)], |g, v| {
            let a = g.softmax_rows(v[0])?;
            g.l1_normalize_columns(a)
        }),
        case(
            "conv2d pointwise",
            CONV_TOL,
            |s| vec![randn_like(&[1, 3, 4, 4], s), randn_like(&[2, 3, 1, 1], s + 1)],
            |g, v| g.conv2d(v[0], v[1], None, 1, 0),
        ),
        case("adaptive_avg_pool2d", TOL, |s| vec![randn_like(&[1, 2, 5, 7], s)], |g, v| {
            g.adaptive_avg_pool2d(v[0], 2, 3)
        }),
        case("gaussian_blur2d", TOL, |s| vec![randn_like(&[1, 2, 6, 5], s)], |g, v| {
            g.gaussian_blur2d(v[0], 1.0)
        }),
        case(
            "batch_norm train nchw",
            TOL,
            |s| vec![randn_like(&[3, 2, 2, 2], s), randn_like(&[2], s + 1), randn_like(&[2], s + 2)],
            |g, v| Ok(g.batch_norm(v[0], v[1], v[2], 1, BatchNormMode::Train { eps: 1e-5 })?.0),
        ),
        case(
            "batch_norm train rows",
            TOL,
            |s| vec![randn_like(&[2, 3, 4], s), randn_like(&[4], s + 1), randn_like(&[4], s + 2)],
            |g, v| Ok(g.batch_norm(v[0], v[1], v[2], 2, BatchNormMode::Train { eps: 1e-5 })?.0),
        ),
        case(
            "batch_norm eval",
            TOL,
            |s| vec![randn_like(&[2, 2, 3], s), randn_like(&[2], s + 1), randn_like(&[2], s + 2)],
            |g, v| {
                let mode = BatchNormMode::Eval {
                    mean: &[0.1, -0.2],
                    var: &[0.5, 1.5],
                    eps: 1e-5,
                };
                Ok(g.batch_norm(v[0], v[1], v[2], 1, mode)?.0)
            },
        ),
        // x feeds three paths that rejoin.
        case("fanout", TOL, |s| vec![randn_like(&[3, 3], s), randn_like(&[3, 3], s + 5)], |g, v| {
            let xw = g.matmul(v[0], v[1])?;
            let t = g.tanh(xw);
            let sq = g.mul(v[0], v[0])?;
            let s = g.add(t, sq)?;
            let sm = g.softmax_rows(s)?;
            g.mul(sm, v[0])
        }),
    ];
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        v.push(case(
            format!("conv2d s{stride} p{pad}"),
            CONV_TOL,
            |s| {
                vec![
                    randn_like(&[2, 2, 5, 5], s),
                    randn_like(&[3, 2, 3, 3], s + 11),
                    randn_like(&[3], s + 12),
                ]
            },
            move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad),
        ));
    }
    v
}
