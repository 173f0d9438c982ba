//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order. Each recorded
//! variable ([`Var`]) owns its forward value and, after [`Graph::backward`],
//! its gradient. Creation order is a valid topological order, so backward is
//! a single reverse sweep that visits each node once.
//!
//! [`Graph::detach`] produces a variable with no tape link: it is a fresh
//! constant leaf carrying the same value, so nothing upstream of it can
//! receive gradient through that edge.

mod backward;
pub(crate) mod kernels;
mod ops;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use kernels::gaussian_kernel;
pub use ops::BatchNormMode;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a variable recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    /// Parameter or input supplied by the caller.
    Leaf,
    /// Output of `detach`: value copy with no tape link.
    Detached,
    /// Identity used as a named gradient entry point.
    Tap(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    TransposeLast2 {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f32,
    },
    AddScalar {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    LeakyRelu {
        a: Var,
        slope: f32,
    },
    Tanh {
        a: Var,
    },
    Abs {
        a: Var,
    },
    Square {
        a: Var,
    },
    SoftmaxRows {
        a: Var,
    },
    L1NormalizeColumns {
        a: Var,
        sums: Vec<f32>,
        /// Columns whose sum was raised to the clamp; their denominator is
        /// a constant.
        clamped: Vec<bool>,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geo: kernels::ConvGeometry,
    },
    AdaptiveAvgPool2d {
        x: Var,
    },
    UpsampleNearest2d {
        x: Var,
        factor: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        channel_axis: usize,
        train: bool,
    },
    GaussianBlur2d {
        x: Var,
        kernel: Vec<f32>,
    },
    L1Loss {
        a: Var,
        b: Var,
    },
    MseLoss {
        a: Var,
        b: Var,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Detached => vec![],
            Tap(a) => vec![*a],
            MatMul { a, b, .. } | Add { a, b } | Sub { a, b } | Mul { a, b } => vec![*a, *b],
            L1Loss { a, b } | MseLoss { a, b } => vec![*a, *b],
            TransposeLast2 { a }
            | Reshape { a }
            | Scale { a, .. }
            | AddScalar { a }
            | Sum { a }
            | Mean { a }
            | LeakyRelu { a, .. }
            | Tanh { a }
            | Abs { a }
            | Square { a }
            | SoftmaxRows { a }
            | L1NormalizeColumns { a, .. } => vec![*a],
            Conv2d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias.iter().copied());
                v
            }
            AdaptiveAvgPool2d { x }
            | UpsampleNearest2d { x, .. }
            | GaussianBlur2d { x, .. } => vec![*x],
            Concat { inputs, .. } => inputs.clone(),
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }

    pub(crate) fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Detached => "detached",
            Tap(_) => "tap",
            MatMul { .. } => "matmul",
            TransposeLast2 { .. } => "transpose",
            Reshape { .. } => "reshape",
            Add { .. } => "add",
            Sub { .. } => "sub",
            Mul { .. } => "mul",
            Scale { .. } => "scale",
            AddScalar { .. } => "add_scalar",
            Sum { .. } => "sum",
            Mean { .. } => "mean",
            LeakyRelu { .. } => "leaky_relu",
            Tanh { .. } => "tanh",
            Abs { .. } => "abs",
            Square { .. } => "square",
            SoftmaxRows { .. } => "softmax_rows",
            L1NormalizeColumns { .. } => "l1_normalize_columns",
            Conv2d { .. } => "conv2d",
            AdaptiveAvgPool2d { .. } => "adaptive_avg_pool2d",
            UpsampleNearest2d { .. } => "upsample_nearest2d",
            Concat { .. } => "concat",
            BatchNorm { .. } => "batch_norm",
            GaussianBlur2d { .. } => "gaussian_blur2d",
            L1Loss { .. } => "l1_loss",
            MseLoss { .. } => "mse_loss",
        }
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub requires_grad: bool,
    pub op: Op,
}

/// Knobs for a single backward sweep.
#[derive(Clone, Debug, Default)]
pub struct BackwardOptions {
    /// Nodes that receive gradient but do not pass it on to their inputs,
    /// i.e. the edge into each of them is treated as detached.
    pub blocked: Vec<Var>,
    /// Stop the sweep once it reaches nodes created before this one.
    /// Gradients of earlier nodes are left unset.
    pub stop_below: Option<Var>,
}

/// Recorded computation plus gradient slots.
pub struct Graph {
    id: u64,
    recording: bool,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            recording: true,
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// A graph on which `param` yields constants: nothing is differentiable
    /// and forward values are identical to a recording graph.
    pub fn inference() -> Self {
        Graph {
            recording: false,
            ..Self::new()
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.recording,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Value-identical copy with no tape link.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, false, Op::Detached)
    }

    /// Identity node marking a gradient branch entry point.
    pub fn tap(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::Tap(a))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Whether `v` has a recorded producing operation (false for leaves and
    /// detached values).
    pub fn has_tape_node(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Leaf | Op::Detached)
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Every `(input, consumer)` pair along which backward can carry gradient.
    pub fn gradient_edges(&self) -> Vec<(Var, Var)> {
        let mut edges = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                continue;
            }
            for input in node.op.inputs() {
                if self.requires_grad(input) {
                    edges.push((input, Var(i)));
                }
            }
        }
        edges
    }

    /// Number of gradient edges leaving `v` toward its consumers.
    pub fn gradient_fanout(&self, v: Var) -> usize {
        if !self.requires_grad(v) {
            return 0;
        }
        self.gradient_edges()
            .iter()
            .filter(|(input, _)| *input == v)
            .count()
    }

    /// Whether gradient can flow from `to` back into `from` along recorded
    /// gradient edges.
    pub fn has_gradient_path(&self, from: Var, to: Var) -> bool {
        if from.0 > to.0 || !self.requires_grad(from) {
            return false;
        }
        let mut reach = vec![false; to.0 + 1];
        reach[to.0] = self.requires_grad(to);
        for i in (from.0..=to.0).rev() {
            if !reach[i] {
                continue;
            }
            if i == from.0 {
                return true;
            }
            for input in self.nodes[i].op.inputs() {
                if input.0 >= from.0 && self.requires_grad(input) {
                    reach[input.0] = true;
                }
            }
        }
        false
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// The gradient of `v`, or zeros when no gradient reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_with(loss, &BackwardOptions::default())
    }

    pub fn backward_with(&mut self, loss: Var, opts: &BackwardOptions) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut blocked = vec![false; self.nodes.len()];
        for b in &opts.blocked {
            blocked[b.0] = true;
        }
        let floor = opts.stop_below.map_or(0, |v| v.0);
        if self.requires_grad(loss) {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        }
        for i in (floor..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad && !blocked[i] {
                for (input, gi) in backward::vjp(self, node, &g) {
                    if input.0 < floor || !self.requires_grad(input) {
                        continue;
                    }
                    accumulate(&mut grads[input.0], gi);
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}
