//! Vector-Jacobian products for every recorded operation.

use super::kernels::{self, MatRef};
use super::{Graph, Node, Op, Var};
use crate::tensor::Tensor;

fn like(g: &Graph, v: Var, data: Vec<f32>) -> Tensor {
    Tensor::from_parts(g.shape(v).to_vec(), data)
}

fn map_grad(g: &Graph, a: Var, upstream: &Tensor, f: impl Fn(usize, f32) -> f32) -> Tensor {
    let data = upstream.data().iter().enumerate().map(|(i, &u)| f(i, u)).collect();
    like(g, a, data)
}

/// Gradient contributions of `node` to each of its inputs, given the
/// gradient `up` of the loss with respect to the node's output.
pub(super) fn vjp(graph: &Graph, node: &Node, up: &Tensor) -> Vec<(Var, Tensor)> {
    let val = |v: Var| graph.value(v).data();
    match &node.op {
        Op::Leaf | Op::Detached => vec![],
        Op::Tap(a) => vec![(*a, up.clone())],
        Op::MatMul { a, b, batch, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let mut out = Vec::with_capacity(2);
            if graph.requires_grad(*a) {
                let bv = val(*b);
                let mut da = vec![0.0f32; batch * m * k];
                for i in 0..*batch {
                    // da = g . b^T
                    kernels::gemm(
                        m,
                        n,
                        k,
                        MatRef::rows(&up.data()[i * m * n..(i + 1) * m * n], n),
                        MatRef::transposed(&bv[i * k * n..(i + 1) * k * n], n),
                        0.0,
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                }
                out.push((*a, like(graph, *a, da)));
            }
            if graph.requires_grad(*b) {
                let av = val(*a);
                let mut db = vec![0.0f32; batch * k * n];
                for i in 0..*batch {
                    // db = a^T . g
                    kernels::gemm(
                        k,
                        m,
                        n,
                        MatRef::transposed(&av[i * m * k..(i + 1) * m * k], k),
                        MatRef::rows(&up.data()[i * m * n..(i + 1) * m * n], n),
                        0.0,
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
                out.push((*b, like(graph, *b, db)));
            }
            out
        }
        Op::TransposeLast2 { a } => {
            let s = graph.shape(*a);
            let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
            let batch = up.numel() / (r * c).max(1);
            let mut da = vec![0.0f32; up.numel()];
            let gd = up.data();
            for b in 0..batch {
                for i in 0..r {
                    for j in 0..c {
                        da[b * r * c + i * c + j] = gd[b * r * c + j * r + i];
                    }
                }
            }
            vec![(*a, like(graph, *a, da))]
        }
        Op::Reshape { a } => vec![(*a, like(graph, *a, up.data().to_vec()))],
        Op::Add { a, b } => vec![(*a, up.clone()), (*b, up.clone())],
        Op::Sub { a, b } => vec![(*a, up.clone()), (*b, up.map(|x| -x))],
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            vec![
                (*a, map_grad(graph, *a, up, |i, u| u * bv[i])),
                (*b, map_grad(graph, *b, up, |i, u| u * av[i])),
            ]
        }
        Op::Scale { a, factor } => vec![(*a, up.map(|u| u * factor))],
        Op::AddScalar { a } => vec![(*a, up.clone())],
        Op::Sum { a } => {
            let u = up.data()[0];
            vec![(*a, Tensor::full(graph.shape(*a), u))]
        }
        Op::Mean { a } => {
            let n = graph.value(*a).numel().max(1);
            let u = up.data()[0] / n as f32;
            vec![(*a, Tensor::full(graph.shape(*a), u))]
        }
        Op::LeakyRelu { a, slope } => {
            let av = val(*a);
            vec![(*a, map_grad(graph, *a, up, |i, u| if av[i] > 0.0 { u } else { u * slope }))]
        }
        Op::Tanh { .. } => {
            let y = node.value.data();
            let a = node.op.inputs()[0];
            vec![(a, map_grad(graph, a, up, |i, u| u * (1.0 - y[i] * y[i])))]
        }
        Op::Abs { a } => {
            let av = val(*a);
            vec![(*a, map_grad(graph, *a, up, |i, u| {
                if av[i] > 0.0 {
                    u
                } else if av[i] < 0.0 {
                    -u
                } else {
                    0.0
                }
            }))]
        }
        Op::Square { a } => {
            let av = val(*a);
            vec![(*a, map_grad(graph, *a, up, |i, u| 2.0 * av[i] * u))]
        }
        Op::SoftmaxRows { a } => {
            let y = node.value.data();
            let n = *node.value.shape().last().unwrap();
            let mut da = vec![0.0f32; y.len()];
            for ((yr, gr), dr) in y.chunks(n).zip(up.data().chunks(n)).zip(da.chunks_mut(n)) {
                let dot: f32 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                for j in 0..n {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![(*a, like(graph, *a, da))]
        }
        Op::L1NormalizeColumns { a, sums, clamped } => {
            let y = node.value.data();
            let s = node.value.shape();
            let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
            let batch = y.len() / (m * n).max(1);
            let gd = up.data();
            let mut da = vec![0.0f32; y.len()];
            for b in 0..batch {
                for j in 0..n {
                    let mut dot = 0.0f32;
                    if !clamped[b * n + j] {
                        for i in 0..m {
                            let idx = (b * m + i) * n + j;
                            dot += gd[idx] * y[idx];
                        }
                    }
                    let inv = 1.0 / sums[b * n + j];
                    for i in 0..m {
                        let idx = (b * m + i) * n + j;
                        da[idx] = (gd[idx] - dot) * inv;
                    }
                }
            }
            vec![(*a, like(graph, *a, da))]
        }
        Op::Conv2d { x, w, bias, geo } => {
            let bsz = graph.shape(*x)[0];
            let o = graph.shape(*w)[0];
            let p = geo.col_cols();
            let rows = geo.col_rows();
            let in_len = geo.channels * geo.height * geo.width;
            let (xv, wv, gd) = (val(*x), val(*w), up.data());
            let need_x = graph.requires_grad(*x);
            let need_w = graph.requires_grad(*w);
            let mut dx = vec![0.0f32; if need_x { xv.len() } else { 0 }];
            let mut dw = vec![0.0f32; if need_w { wv.len() } else { 0 }];
            let mut cols = vec![0.0f32; rows * p];
            let mut dcols = vec![0.0f32; rows * p];
            for bi in 0..bsz {
                let gb = &gd[bi * o * p..(bi + 1) * o * p];
                if need_w {
                    let img = &xv[bi * in_len..(bi + 1) * in_len];
                    let colv: &[f32] = if geo.is_pointwise() {
                        img
                    } else {
                        kernels::im2col(img, geo, &mut cols);
                        &cols
                    };
                    // dW += g_b . cols^T
                    kernels::gemm(o, p, rows, MatRef::rows(gb, p), MatRef::transposed(colv, p), 1.0, &mut dw);
                }
                if need_x {
                    let dst = &mut dx[bi * in_len..(bi + 1) * in_len];
                    if geo.is_pointwise() {
                        kernels::gemm(rows, o, p, MatRef::transposed(wv, rows), MatRef::rows(gb, p), 0.0, dst);
                    } else {
                        kernels::gemm(rows, o, p, MatRef::transposed(wv, rows), MatRef::rows(gb, p), 0.0, &mut dcols);
                        kernels::col2im(&dcols, geo, dst);
                    }
                }
            }
            let mut out = Vec::with_capacity(3);
            if need_x {
                out.push((*x, like(graph, *x, dx)));
            }
            if need_w {
                out.push((*w, like(graph, *w, dw)));
            }
            if let Some(b) = bias {
                let mut db = vec![0.0f32; o];
                for bi in 0..bsz {
                    for (oc, d) in db.iter_mut().enumerate() {
                        let base = (bi * o + oc) * p;
                        *d += gd[base..base + p].iter().sum::<f32>();
                    }
                }
                out.push((*b, like(graph, *b, db)));
            }
            out
        }
        Op::AdaptiveAvgPool2d { x } => {
            let s = graph.shape(*x);
            let (h, w) = (s[2], s[3]);
            let os = node.value.shape();
            let (oh, ow) = (os[2], os[3]);
            let planes = s[0] * s[1];
            let gd = up.data();
            let mut dx = vec![0.0f32; planes * h * w];
            for plane in 0..planes {
                for oy in 0..oh {
                    let (y0, y1) = kernels::adaptive_window(oy, h, oh);
                    for ox in 0..ow {
                        let (x0, x1) = kernels::adaptive_window(ox, w, ow);
                        let share = gd[(plane * oh + oy) * ow + ox] / ((y1 - y0) * (x1 - x0)) as f32;
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                dx[plane * h * w + yy * w + xx] += share;
                            }
                        }
                    }
                }
            }
            vec![(*x, like(graph, *x, dx))]
        }
        Op::UpsampleNearest2d { x, factor } => {
            let s = graph.shape(*x);
            let (h, w) = (s[2], s[3]);
            let (oh, ow) = (h * factor, w * factor);
            let planes = s[0] * s[1];
            let gd = up.data();
            let mut dx = vec![0.0f32; planes * h * w];
            for plane in 0..planes {
                for y in 0..oh {
                    for xx in 0..ow {
                        dx[(plane * h + y / factor) * w + xx / factor] += gd[(plane * oh + y) * ow + xx];
                    }
                }
            }
            vec![(*x, like(graph, *x, dx))]
        }
        Op::Concat { inputs, axis } => {
            let base = node.value.shape();
            let outer: usize = base[..*axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let total = base[*axis] * inner;
            let gd = up.data();
            let mut offset = 0;
            let mut out = Vec::with_capacity(inputs.len());
            for &v in inputs {
                let len = graph.shape(v)[*axis] * inner;
                if graph.requires_grad(v) {
                    let mut dv = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        dv.extend_from_slice(&gd[o * total + offset..o * total + offset + len]);
                    }
                    out.push((v, like(graph, v, dv)));
                }
                offset += len;
            }
            out
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            channel_axis,
            train,
        } => {
            let s = graph.shape(*x);
            let outer: usize = s[..*channel_axis].iter().product();
            let c = s[*channel_axis];
            let inner: usize = s[channel_axis + 1..].iter().product();
            let count = (outer * inner) as f32;
            let gv = val(*gamma);
            let gd = up.data();
            let mut dgamma = vec![0.0f32; c];
            let mut dbeta = vec![0.0f32; c];
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    for i in base..base + inner {
                        dgamma[ch] += gd[i] * xhat[i];
                        dbeta[ch] += gd[i];
                    }
                }
            }
            let mut dx = vec![0.0f32; gd.len()];
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    for i in base..base + inner {
                        dx[i] = if *train {
                            // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
                            gv[ch] * inv_std[ch] / count
                                * (count * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                        } else {
                            gd[i] * gv[ch] * inv_std[ch]
                        };
                    }
                }
            }
            vec![
                (*x, like(graph, *x, dx)),
                (*gamma, like(graph, *gamma, dgamma)),
                (*beta, like(graph, *beta, dbeta)),
            ]
        }
        Op::GaussianBlur2d { x, kernel } => {
            let s = graph.shape(*x);
            let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
            let gd = up.data();
            let mut tmp = vec![0.0f32; h * w];
            let mut dx = vec![0.0f32; gd.len()];
            for p in 0..planes {
                tmp.fill(0.0);
                kernels::blur_cols_adjoint(&gd[p * h * w..(p + 1) * h * w], h, w, kernel, &mut tmp);
                kernels::blur_rows_adjoint(&tmp, h, w, kernel, &mut dx[p * h * w..(p + 1) * h * w]);
            }
            vec![(*x, like(graph, *x, dx))]
        }
        Op::L1Loss { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let scale = up.data()[0] / av.len().max(1) as f32;
            let da: Vec<f32> = av
                .iter()
                .zip(bv)
                .map(|(&p, &q)| {
                    if p > q {
                        scale
                    } else if p < q {
                        -scale
                    } else {
                        0.0
                    }
                })
                .collect();
            let db = da.iter().map(|v| -v).collect();
            vec![(*a, like(graph, *a, da)), (*b, like(graph, *b, db))]
        }
        Op::MseLoss { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let scale = 2.0 * up.data()[0] / av.len().max(1) as f32;
            let da: Vec<f32> = av.iter().zip(bv).map(|(&p, &q)| scale * (p - q)).collect();
            let db = da.iter().map(|v| -v).collect();
            vec![(*a, like(graph, *a, da)), (*b, like(graph, *b, db))]
        }
    }
}
