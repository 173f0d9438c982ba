//! Dot-product attention (the SCFT-style baseline) and stop-gradient
//! attention with double normalization, plus the cross/self SGA blocks.
//!
//! Every attention application records identity "tap" nodes at the entry
//! of each gradient branch. Blocking all taps but one during backward
//! isolates that branch's contribution to the input gradient; see
//! [`crate::diagnostics::capture_branch_gradients`].

use std::fmt;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{kaiming_uniform, BatchNormLayer, Ctx, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_LEAKY_SLOPE: f32 = 0.2;

/// One gradient branch entering an attention input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    /// Residual path `+ X` of the baseline.
    Skip,
    /// `X -> Q -> A` in the baseline.
    Q,
    /// `Y -> K -> A` in the baseline.
    K,
    /// `Y -> V -> A V` in the baseline.
    V,
    /// `X -> sigma(X W_x)` in SGA.
    XDirect,
    /// `Y -> sigma(Y W_y) -> A sigma(Y W_y)` in SGA.
    YDirect,
    /// `X -> A` in SGA (zero under stop-gradient).
    XAttn,
    /// `Y -> A` in SGA (zero under stop-gradient).
    YAttn,
}

/// Which attention input a branch feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    X,
    Y,
}

impl Branch {
    pub const BASELINE: [Branch; 4] = [Branch::Skip, Branch::Q, Branch::K, Branch::V];
    pub const SGA: [Branch; 4] = [Branch::XDirect, Branch::YDirect, Branch::XAttn, Branch::YAttn];

    pub fn side(self) -> Side {
        match self {
            Branch::Skip | Branch::Q | Branch::XDirect | Branch::XAttn => Side::X,
            Branch::K | Branch::V | Branch::YDirect | Branch::YAttn => Side::Y,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Branch::Skip => "skip",
            Branch::Q => "Q",
            Branch::K => "K",
            Branch::V => "V",
            Branch::XDirect => "X-direct",
            Branch::YDirect => "Y-direct",
            Branch::XAttn => "X-attn",
            Branch::YAttn => "Y-attn",
        }
    }

    /// Branches that run through the attention map.
    pub fn through_attention_map(self) -> bool {
        matches!(self, Branch::Q | Branch::K | Branch::XAttn | Branch::YAttn)
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Gradient entry points of one attention application.
#[derive(Clone, Debug)]
pub struct BranchTapHandles {
    graph_id: u64,
    /// Entry node for the X input; every X branch starts here.
    pub x: Var,
    /// Entry node for the Y input.
    pub y: Var,
    pub branches: Vec<(Branch, Var)>,
    /// The (normalized) attention map multiplied into the values.
    pub attention_map: Var,
}

impl BranchTapHandles {
    pub fn graph_id(&self) -> u64 {
        self.graph_id
    }

    pub fn tap(&self, branch: Branch) -> Option<Var> {
        self.branches.iter().find(|(b, _)| *b == branch).map(|(_, v)| *v)
    }

    pub fn entry(&self, side: Side) -> Var {
        match side {
            Side::X => self.x,
            Side::Y => self.y,
        }
    }

    pub fn ensure_live(&self, g: &Graph) -> Result<()> {
        if g.id() != self.graph_id || self.attention_map.index() >= g.len() {
            return Err(Error::StaleHandle {
                recorded: self.graph_id,
                current: g.id(),
            });
        }
        Ok(())
    }
}

fn check_pair(g: &Graph, x: Var, y: Var, d: usize) -> Result<()> {
    let (sx, sy) = (g.shape(x), g.shape(y));
    if sx != sy {
        return Err(Error::shapes("attention inputs", sx, sy));
    }
    if !(sx.len() == 2 || sx.len() == 3) || sx[sx.len() - 1] != d {
        return Err(Error::Dimension(format!(
            "attention expects n x {d} or b x n x {d} inputs, got {sx:?}"
        )));
    }
    Ok(())
}

/// `x W` for `x` of shape `n x d` or `b x n x d`.
pub fn linear(g: &mut Graph, x: Var, w: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() == 3 {
        let flat = g.reshape(x, &[shape[0] * shape[1], shape[2]])?;
        let y = g.matmul(flat, w)?;
        let out = g.shape(y)[1];
        g.reshape(y, &[shape[0], shape[1], out])
    } else {
        g.matmul(x, w)
    }
}

fn square_weight(t: &Tensor, d: usize, name: &str) -> Result<()> {
    if t.shape() != [d, d] {
        return Err(Error::Dimension(format!("{name} must be {d}x{d}, got {:?}", t.shape())));
    }
    Ok(())
}

/// Projection weights of the baseline attention.
#[derive(Clone, Debug)]
pub struct BaselineAttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub d: usize,
}

impl BaselineAttentionParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        let mut w = || kaiming_uniform(&[d, d], d, 1.0, rng);
        let (q, k, v) = (w(), w(), w());
        Self::from_weights(store, name, q, k, v).expect("square weights")
    }

    pub fn from_weights(store: &mut ParamStore, name: &str, w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Result<Self> {
        let d = w_q.shape().first().copied().unwrap_or(0);
        for (t, n) in [(&w_q, "W_q"), (&w_k, "W_k"), (&w_v, "W_v")] {
            square_weight(t, d, n)?;
        }
        Ok(BaselineAttentionParams {
            w_q: store.add(format!("{name}.w_q"), w_q),
            w_k: store.add(format!("{name}.w_k"), w_k),
            w_v: store.add(format!("{name}.w_v"), w_v),
            d,
        })
    }

    pub fn scale(&self) -> f32 {
        1.0 / (self.d as f32).sqrt()
    }
}

/// `Z = softmax(Q K^T / sqrt(d)) V + X` with `Q = X W_q`, `K = Y W_k`,
/// `V = Y W_v`. With `stop_grad_map` the attention map is detached, so the
/// Q and K branches carry exactly zero gradient.
pub fn baseline_attention(
    cx: &mut Ctx,
    x: Var,
    y: Var,
    p: &BaselineAttentionParams,
    stop_grad_map: bool,
) -> Result<(Var, BranchTapHandles)> {
    check_pair(cx.g, x, y, p.d)?;
    let (wq, wk, wv) = (cx.var(p.w_q), cx.var(p.w_k), cx.var(p.w_v));
    let g = &mut *cx.g;
    let x_in = g.tap(x);
    let y_in = g.tap(y);
    let skip = g.tap(x_in);
    let xq = g.tap(x_in);
    let yk = g.tap(y_in);
    let yv = g.tap(y_in);

    let q = linear(g, xq, wq)?;
    let k = linear(g, yk, wk)?;
    let v = linear(g, yv, wv)?;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, p.scale());
    let mut a = g.softmax_rows(logits)?;
    if stop_grad_map {
        a = g.detach(a);
    }
    let av = g.matmul(a, v)?;
    let z = g.add(av, skip)?;
    let taps = BranchTapHandles {
        graph_id: g.id(),
        x: x_in,
        y: y_in,
        branches: vec![(Branch::Skip, skip), (Branch::Q, xq), (Branch::K, yk), (Branch::V, yv)],
        attention_map: a,
    };
    Ok((z, taps))
}

/// Switches for the SGA ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SgaOptions {
    /// Compute the attention map under a gradient barrier.
    pub stop_gradient: bool,
    /// Follow the row softmax with column L1 normalization.
    pub double_norm: bool,
}

impl Default for SgaOptions {
    fn default() -> Self {
        SgaOptions {
            stop_gradient: true,
            double_norm: true,
        }
    }
}

/// Weights of one cross- or self-SGA block. There are no query/key
/// projections: the map is built from the raw inputs.
#[derive(Clone, Debug)]
pub struct SgaBlockParams {
    pub w_x: ParamId,
    pub w_y: ParamId,
    pub d: usize,
    pub leaky_slope: f32,
    pub bn: BatchNormLayer,
}

impl SgaBlockParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        let wx = kaiming_uniform(&[d, d], d, DEFAULT_LEAKY_SLOPE, rng);
        let wy = kaiming_uniform(&[d, d], d, DEFAULT_LEAKY_SLOPE, rng);
        Self::from_weights(store, name, wx, wy, DEFAULT_LEAKY_SLOPE).expect("square weights")
    }

    pub fn from_weights(store: &mut ParamStore, name: &str, w_x: Tensor, w_y: Tensor, leaky_slope: f32) -> Result<Self> {
        let d = w_x.shape().first().copied().unwrap_or(0);
        square_weight(&w_x, d, "W_x")?;
        square_weight(&w_y, d, "W_y")?;
        if !(leaky_slope > 0.0 && leaky_slope < 1.0) {
            return Err(Error::Contract(format!("leaky slope {leaky_slope} outside (0,1)")));
        }
        Ok(SgaBlockParams {
            w_x: store.add(format!("{name}.w_x"), w_x),
            w_y: store.add(format!("{name}.w_y"), w_y),
            d,
            leaky_slope,
            bn: BatchNormLayer::new(store, &format!("{name}.bn"), d, 0),
        })
    }
}

/// Floor on column sums in the column normalization. Rows of the softmax can
/// underflow to exact one-hots for large logits, leaving empty columns; those
/// stay zero rather than being rejected.
pub const COLUMN_NORM_EPS: f32 = 1e-12;

/// Builds the doubly normalized map from raw features:
/// `A = X Y^T`, row softmax, then column L1 normalization.
pub fn double_normalized_map(g: &mut Graph, x: Var, y: Var, double_norm: bool) -> Result<Var> {
    let yt = g.transpose(y)?;
    let a = g.matmul(x, yt)?;
    let a = g.softmax_rows(a)?;
    if double_norm {
        g.l1_normalize_columns_clamped(a, COLUMN_NORM_EPS)
    } else {
        Ok(a)
    }
}

/// `Z = sigma(X W_x) + A_hat sigma(Y W_y)` where `A_hat` is built from
/// `X` and `Y` behind a gradient barrier (unless disabled for ablation).
pub fn sga_core(cx: &mut Ctx, x: Var, y: Var, p: &SgaBlockParams, opts: SgaOptions) -> Result<(Var, BranchTapHandles)> {
    check_pair(cx.g, x, y, p.d)?;
    let (wx, wy) = (cx.var(p.w_x), cx.var(p.w_y));
    let g = &mut *cx.g;
    let x_in = g.tap(x);
    let y_in = g.tap(y);
    let x_direct = g.tap(x_in);
    let y_direct = g.tap(y_in);
    let x_attn = g.tap(x_in);
    let y_attn = g.tap(y_in);

    let (xa, ya) = if opts.stop_gradient {
        (g.detach(x_attn), g.detach(y_attn))
    } else {
        (x_attn, y_attn)
    };
    let a_hat = double_normalized_map(g, xa, ya, opts.double_norm)?;

    let xw = linear(g, x_direct, wx)?;
    let xs = g.leaky_relu(xw, p.leaky_slope)?;
    let yw = linear(g, y_direct, wy)?;
    let ys = g.leaky_relu(yw, p.leaky_slope)?;
    let mixed = g.matmul(a_hat, ys)?;
    let z = g.add(xs, mixed)?;
    let taps = BranchTapHandles {
        graph_id: g.id(),
        x: x_in,
        y: y_in,
        branches: vec![
            (Branch::XDirect, x_direct),
            (Branch::YDirect, y_direct),
            (Branch::XAttn, x_attn),
            (Branch::YAttn, y_attn),
        ],
        attention_map: a_hat,
    };
    Ok((z, taps))
}

/// SGA core, batch normalization, then the shortcut `+ f_s`.
pub fn cross_sga_block(
    cx: &mut Ctx,
    f_s: Var,
    f_r: Var,
    p: &SgaBlockParams,
    opts: SgaOptions,
) -> Result<(Var, BranchTapHandles)> {
    let (z, taps) = sga_core(cx, f_s, f_r, p, opts)?;
    let normed = p.bn.forward(cx, z)?;
    let out = cx.g.add(normed, f_s)?;
    Ok((out, taps))
}

/// Cross-SGA with both inputs equal.
pub fn self_sga_block(cx: &mut Ctx, f: Var, p: &SgaBlockParams, opts: SgaOptions) -> Result<(Var, BranchTapHandles)> {
    cross_sga_block(cx, f, f, p, opts)
}
