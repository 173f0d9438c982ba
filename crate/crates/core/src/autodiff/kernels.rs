//! Raw numeric kernels shared by the forward and backward passes.
//!
//! Everything here is single-threaded with a fixed summation order, so a
//! graph evaluated twice on the same inputs produces bitwise-equal results.

/// Row-major matrix view described by its row and column strides.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f32],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn rows(data: &'a [f32], cols: usize) -> Self {
        MatRef {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f32], cols: usize) -> Self {
        MatRef {
            data,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = beta * c + a * b` with `a: m x k`, `b: k x n`, `c: m x n` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: f32, c: &mut [f32]) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the views were constructed from slices that cover every index
    // reachable through the given extents and strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `c x h x w` image into a `(c*kh*kw) x (out_h*out_w)` matrix.
pub(crate) fn im2col(x: &[f32], geo: &ConvGeometry, cols: &mut [f32]) {
    let p = geo.col_cols();
    for c in 0..geo.channels {
        let plane = &x[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let row = (c * geo.kh + ki) * geo.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..geo.out_h {
                    let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                    let line = &mut dst[oy * geo.out_w..(oy + 1) * geo.out_w];
                    if iy < 0 || iy >= geo.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * geo.width..(iy as usize + 1) * geo.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * geo.stride + kj) as isize - geo.pad as isize;
                        *v = if ix < 0 || ix >= geo.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im(cols: &[f32], geo: &ConvGeometry, dx: &mut [f32]) {
    let p = geo.col_cols();
    for c in 0..geo.channels {
        let plane = &mut dx[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let row = (c * geo.kh + ki) * geo.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..geo.out_h {
                    let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.height as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * geo.width..(iy as usize + 1) * geo.width];
                    for ox in 0..geo.out_w {
                        let ix = (ox * geo.stride + kj) as isize - geo.pad as isize;
                        if ix >= 0 && ix < geo.width as isize {
                            line[ix as usize] += src[oy * geo.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Window `[start, end)` of output cell `i` when pooling `len` inputs into
/// `out` cells: `start = floor(i*len/out)`, `end = ceil((i+1)*len/out)`.
pub(crate) fn adaptive_window(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

/// Mirror index without repeating the edge sample (`-1 -> 1`).
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= len as isize {
        r = period - r;
    }
    r as usize
}

/// Normalized Gaussian taps truncated at `3 sigma` (radius rounded up).
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma as f64).ceil().max(1.0) as isize;
    let s2 = 2.0 * (sigma as f64) * (sigma as f64);
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / s2).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / total) as f32).collect()
}

/// Correlates every row of a `rows x len` block with `kernel`, reflect padded.
pub(crate) fn blur_rows(src: &[f32], rows: usize, len: usize, kernel: &[f32], dst: &mut [f32]) {
    let radius = (kernel.len() / 2) as isize;
    for r in 0..rows {
        let line = &src[r * len..(r + 1) * len];
        let out = &mut dst[r * len..(r + 1) * len];
        for (o, v) in out.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for (t, &k) in kernel.iter().enumerate() {
                acc += k * line[reflect_index(o as isize + t as isize - radius, len)];
            }
            *v = acc;
        }
    }
}

/// Correlates every column of a `rows x len` block with `kernel`.
pub(crate) fn blur_cols(src: &[f32], rows: usize, len: usize, kernel: &[f32], dst: &mut [f32]) {
    let radius = (kernel.len() / 2) as isize;
    dst[..rows * len].fill(0.0);
    for o in 0..rows {
        let out = &mut dst[o * len..(o + 1) * len];
        for (t, &k) in kernel.iter().enumerate() {
            let r = reflect_index(o as isize + t as isize - radius, rows);
            let line = &src[r * len..(r + 1) * len];
            for (v, &s) in out.iter_mut().zip(line) {
                *v += k * s;
            }
        }
    }
}

/// Adjoint of [`blur_rows`].
pub(crate) fn blur_rows_adjoint(g: &[f32], rows: usize, len: usize, kernel: &[f32], dx: &mut [f32]) {
    let radius = (kernel.len() / 2) as isize;
    for r in 0..rows {
        let gl = &g[r * len..(r + 1) * len];
        let out = &mut dx[r * len..(r + 1) * len];
        for (o, &gv) in gl.iter().enumerate() {
            for (t, &k) in kernel.iter().enumerate() {
                out[reflect_index(o as isize + t as isize - radius, len)] += k * gv;
            }
        }
    }
}

/// Adjoint of [`blur_cols`].
pub(crate) fn blur_cols_adjoint(g: &[f32], rows: usize, len: usize, kernel: &[f32], dx: &mut [f32]) {
    let radius = (kernel.len() / 2) as isize;
    for o in 0..rows {
        let gl = &g[o * len..(o + 1) * len];
        for (t, &k) in kernel.iter().enumerate() {
            let r = reflect_index(o as isize + t as isize - radius, rows);
            let out = &mut dx[r * len..(r + 1) * len];
            for (v, &s) in out.iter_mut().zip(gl) {
                *v += k * s;
            }
        }
    }
}
