//! Forward definitions of the recorded operations.

use super::kernels::{self, ConvGeometry, MatRef};
use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Normalization statistics source for [`Graph::batch_norm`].
#[derive(Clone, Debug)]
pub enum BatchNormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train { eps: f32 },
    /// Normalize with supplied running statistics.
    Eval {
        mean: &'a [f32],
        var: &'a [f32],
        eps: f32,
    },
}

/// Per-channel batch statistics observed in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Unbiased variance, suitable for running-average updates.
    pub var_unbiased: Vec<f32>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    fn check_same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shapes(what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Matrix product over the last two axes. Accepts `m x k` by `k x n` or
    /// batched `b x m x k` by `b x k x n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, k2, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) => (1, *m, *k, *k2, *n),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 => (*b1, *m, *k, *k2, *n),
            _ => return Err(Error::shapes("matmul", &sa, &sb)),
        };
        if k != k2 {
            return Err(Error::shapes("matmul inner extents", &sa, &sb));
        }
        let mut out = vec![0.0f32; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    MatRef::rows(&av[i * m * k..(i + 1) * m * k], k),
                    MatRef::rows(&bv[i * k * n..(i + 1) * k * n], n),
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            rg,
            Op::MatMul { a, b, batch, m, k, n },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::Dimension(format!("transpose of rank-{} tensor", shape.len())));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = shape[..shape.len() - 2].iter().product::<usize>();
        let src = self.value(a).data();
        let mut out = vec![0.0f32; src.len()];
        for b in 0..batch {
            let (s, d) = (&src[b * r * c..(b + 1) * r * c], &mut out[b * r * c..(b + 1) * r * c]);
            for i in 0..r {
                for j in 0..c {
                    d[j * r + i] = s[i * c + j];
                }
            }
        }
        let mut new_shape = shape.clone();
        let len = new_shape.len();
        new_shape.swap(len - 2, len - 1);
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::from_parts(new_shape, out), rg, Op::TransposeLast2 { a }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, rg, Op::Reshape { a }))
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        self.check_same_shape(what, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), rg, op))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.requires_grad(a);
        self.push(value, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        self.unary(a, |x| x * factor, Op::Scale { a, factor })
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar { a })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum() as f32;
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), rg, Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = (t.sum() / t.numel().max(1) as f64) as f32;
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(m), rg, Op::Mean { a })
    }

    /// `max(x, slope * x)` for `slope` in `(0, 1)`.
    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::Contract(format!("leaky_relu slope {slope} outside (0,1)")));
        }
        Ok(self.unary(a, move |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu { a, slope }))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f32::tanh, Op::Tanh { a })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f32::abs, Op::Abs { a })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square { a })
    }

    /// Softmax along the last axis, shifted by the row maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 {
            return Err(Error::Dimension("softmax of a scalar".into()));
        }
        if t.data().iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite("softmax_rows input".into()));
        }
        let n = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut total = 0.0f32;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::from_parts(shape, out), rg, Op::SoftmaxRows { a }))
    }

    /// Divides each column (second-to-last axis) by its sum.
    pub fn l1_normalize_columns(&mut self, a: Var) -> Result<Var> {
        self.normalize_columns(a, None)
    }

    /// Column normalization with the denominator clamped to at least `eps`,
    /// so columns that underflowed to zero stay zero instead of failing.
    pub fn l1_normalize_columns_clamped(&mut self, a: Var, eps: f32) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Contract(format!("clamp epsilon must be positive, got {eps}")));
        }
        self.normalize_columns(a, Some(eps))
    }

    fn normalize_columns(&mut self, a: Var, eps: Option<f32>) -> Result<Var> {
        let t = self.value(a);
        if t.rank() < 2 {
            return Err(Error::Dimension(format!(
                "column normalization needs rank >= 2, got {:?}",
                t.shape()
            )));
        }
        if t.data().iter().any(|&x| x.is_nan() || x < 0.0) {
            return Err(Error::Contract("column normalization needs nonnegative entries".into()));
        }
        let shape = t.shape().to_vec();
        let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = t.numel() / (m * n).max(1);
        let src = t.data();
        let mut sums = vec![0.0f32; batch * n];
        for b in 0..batch {
            for i in 0..m {
                for j in 0..n {
                    sums[b * n + j] += src[(b * m + i) * n + j];
                }
            }
        }
        let mut clamped = vec![false; sums.len()];
        match eps {
            None => {
                if let Some(pos) = sums.iter().position(|&s| s == 0.0) {
                    return Err(Error::DegenerateColumn { column: pos % n });
                }
            }
            Some(eps) => {
                for (s, c) in sums.iter_mut().zip(&mut clamped) {
                    if *s < eps {
                        *s = eps;
                        *c = true;
                    }
                }
            }
        }
        let mut out = src.to_vec();
        for b in 0..batch {
            for i in 0..m {
                for j in 0..n {
                    out[(b * m + i) * n + j] /= sums[b * n + j];
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            rg,
            Op::L1NormalizeColumns { a, sums, clamped },
        ))
    }

    /// 2-D cross-correlation of `b x c x h x w` input with `o x c x kh x kw`
    /// weights, optional per-output-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let ([bsz, c, h, wd], [o, c2, kh, kw]) = (sx.as_slice(), sw.as_slice()) else {
            return Err(Error::shapes("conv2d expects 4-d input and weight", &sx, &sw));
        };
        if c != c2 {
            return Err(Error::shapes("conv2d channel mismatch", &sx, &sw));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        if h + 2 * pad < *kh || wd + 2 * pad < *kw {
            return Err(Error::shapes("conv2d kernel larger than padded input", &sx, &sw));
        }
        if let Some(b) = bias {
            if self.shape(b) != [*o] {
                return Err(Error::shapes("conv2d bias", self.shape(b), &[*o]));
            }
        }
        let geo = ConvGeometry {
            channels: *c,
            height: *h,
            width: *wd,
            kh: *kh,
            kw: *kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (wd + 2 * pad - kw) / stride + 1,
        };
        let (o, bsz) = (*o, *bsz);
        let p = geo.col_cols();
        let mut out = vec![0.0f32; bsz * o * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let mut cols = vec![0.0f32; if geo.is_pointwise() { 0 } else { geo.col_rows() * p }];
            let in_len = geo.channels * geo.height * geo.width;
            for bi in 0..bsz {
                let img = &xv[bi * in_len..(bi + 1) * in_len];
                let colv: &[f32] = if geo.is_pointwise() {
                    img
                } else {
                    kernels::im2col(img, &geo, &mut cols);
                    &cols
                };
                let dst = &mut out[bi * o * p..(bi + 1) * o * p];
                if let Some(b) = bias {
                    let bv = self.value(b).data();
                    for (oc, chunk) in dst.chunks_mut(p).enumerate() {
                        chunk.fill(bv[oc]);
                    }
                }
                let beta = if bias.is_some() { 1.0 } else { 0.0 };
                kernels::gemm(
                    o,
                    geo.col_rows(),
                    p,
                    MatRef::rows(wv, geo.col_rows()),
                    MatRef::rows(colv, p),
                    beta,
                    dst,
                );
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let rg = self.any_grad(&inputs);
        Ok(self.push(
            Tensor::from_parts(vec![bsz, o, geo.out_h, geo.out_w], out),
            rg,
            Op::Conv2d { x, w, bias, geo },
        ))
    }

    /// Averages contiguous windows of a `b x c x h x w` map down to
    /// `out_h x out_w`.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [b, c, h, w] = s.as_slice() else {
            return Err(Error::Dimension(format!("adaptive_avg_pool2d expects 4-d input, got {s:?}")));
        };
        if out_h == 0 || out_w == 0 || out_h > *h || out_w > *w {
            return Err(Error::Dimension(format!(
                "adaptive_avg_pool2d output {out_h}x{out_w} invalid for input {h}x{w}"
            )));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0f32; b * c * out_h * out_w];
        for plane in 0..b * c {
            let ip = &src[plane * h * w..(plane + 1) * h * w];
            for oy in 0..out_h {
                let (y0, y1) = kernels::adaptive_window(oy, *h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = kernels::adaptive_window(ox, *w, out_w);
                    let mut acc = 0.0f32;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            acc += ip[yy * w + xx];
                        }
                    }
                    out[(plane * out_h + oy) * out_w + ox] = acc / ((y1 - y0) * (x1 - x0)) as f32;
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::from_parts(vec![*b, *c, out_h, out_w], out),
            rg,
            Op::AdaptiveAvgPool2d { x },
        ))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [b, c, h, w] = s.as_slice() else {
            return Err(Error::Dimension(format!("upsample expects 4-d input, got {s:?}")));
        };
        if factor == 0 {
            return Err(Error::Contract("upsample factor must be positive".into()));
        }
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![0.0f32; b * c * oh * ow];
        for plane in 0..b * c {
            for y in 0..oh {
                let srow = &src[(plane * h + y / factor) * w..(plane * h + y / factor + 1) * w];
                let drow = &mut out[(plane * oh + y) * ow..(plane * oh + y + 1) * ow];
                for (xx, v) in drow.iter_mut().enumerate() {
                    *v = srow[xx / factor];
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::from_parts(vec![*b, *c, oh, ow], out),
            rg,
            Op::UpsampleNearest2d { x, factor },
        ))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension(format!("concat axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &e)| i != axis && e != base[i])
            {
                return Err(Error::shapes("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Batch normalization over every axis except `channel_axis`.
    /// Returns the batch statistics in training mode.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        channel_axis: usize,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        if channel_axis >= shape.len() {
            return Err(Error::Dimension(format!("batch_norm axis {channel_axis} for {shape:?}")));
        }
        let (outer, c, inner) = split_axis(&shape, channel_axis);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shapes("batch_norm affine parameters", self.shape(gamma), &[c]));
        }
        let count = outer * inner;
        let src = self.value(x).data();
        let (mean, var, eps, train) = match mode {
            BatchNormMode::Train { eps } => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for o in 0..outer {
                    for (ch, m) in mean.iter_mut().enumerate() {
                        let base = (o * c + ch) * inner;
                        *m += src[base..base + inner].iter().map(|&v| v as f64).sum::<f64>();
                    }
                }
                for m in &mut mean {
                    *m /= count as f64;
                }
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for &v in &src[base..base + inner] {
                            let d = v as f64 - mean[ch];
                            var[ch] += d * d;
                        }
                    }
                }
                for v in &mut var {
                    *v /= count as f64;
                }
                (mean, var, eps, true)
            }
            BatchNormMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Dimension("batch_norm running statistics length".into()));
                }
                (
                    mean.iter().map(|&v| v as f64).collect(),
                    var.iter().map(|&v| v as f64).collect(),
                    eps,
                    false,
                )
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|&v| (1.0 / (v + eps as f64).sqrt()) as f32).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0f32; src.len()];
        let mut out = vec![0.0f32; src.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                let m = mean[ch] as f32;
                for i in base..base + inner {
                    let xh = (src[i] - m) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let stats = train.then(|| BatchStats {
            mean: mean.iter().map(|&v| v as f32).collect(),
            var_unbiased: var
                .iter()
                .map(|&v| (v * count as f64 / (count.max(2) - 1) as f64) as f32)
                .collect(),
        });
        let rg = self.any_grad(&[x, gamma, beta]);
        let var_out = self.push(
            Tensor::from_parts(shape, out),
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                channel_axis,
                train,
            },
        );
        Ok((var_out, stats))
    }

    /// Separable Gaussian blur of a `b x c x h x w` map with reflect padding.
    pub fn gaussian_blur2d(&mut self, x: Var, sigma: f32) -> Result<Var> {
        if sigma.is_nan() || sigma <= 0.0 {
            return Err(Error::Contract(format!("gaussian sigma {sigma} must be positive")));
        }
        let s = self.shape(x).to_vec();
        let [b, c, h, w] = s.as_slice() else {
            return Err(Error::Dimension(format!("gaussian_blur2d expects 4-d input, got {s:?}")));
        };
        let kernel = kernels::gaussian_kernel(sigma);
        let out = blur_planes(self.value(x).data(), b * c, *h, *w, &kernel);
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::from_parts(s, out), rg, Op::GaussianBlur2d { x, kernel }))
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("l1_loss", a, b)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let s: f64 = x.iter().zip(y).map(|(&p, &q)| (p as f64 - q as f64).abs()).sum();
        let v = (s / x.len().max(1) as f64) as f32;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(v), rg, Op::L1Loss { a, b }))
    }

    /// Mean squared difference.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mse_loss", a, b)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let s: f64 = x
            .iter()
            .zip(y)
            .map(|(&p, &q)| {
                let d = p as f64 - q as f64;
                d * d
            })
            .sum();
        let v = (s / x.len().max(1) as f64) as f32;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(v), rg, Op::MseLoss { a, b }))
    }
}

pub(crate) fn blur_planes(src: &[f32], planes: usize, h: usize, w: usize, kernel: &[f32]) -> Vec<f32> {
    let mut tmp = vec![0.0f32; h * w];
    let mut out = vec![0.0f32; src.len()];
    for p in 0..planes {
        let ip = &src[p * h * w..(p + 1) * h * w];
        kernels::blur_rows(ip, h, w, kernel, &mut tmp);
        kernels::blur_cols(&tmp, h, w, kernel, &mut out[p * h * w..(p + 1) * h * w]);
    }
    out
}
