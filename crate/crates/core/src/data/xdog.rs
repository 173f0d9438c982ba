use crate::autodiff::kernels::reflect_index;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters of the sharpened, soft-thresholded difference of Gaussians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct XDoGParams {
    /// Steepness of the tanh ramp below the threshold.
    pub phi: f64,
    /// Inner Gaussian std in pixels.
    pub sigma: f64,
    /// Sharpening weight.
    pub p: f64,
    /// Ratio between the outer and inner std.
    pub k: f64,
    pub epsilon: f64,
}

/// The values the inner std is drawn from when building triples.
pub const SIGMA_CHOICES: [f64; 3] = [0.3, 0.4, 0.5];

impl Default for XDoGParams {
    fn default() -> Self {
        XDoGParams {
            phi: 1e9,
            sigma: 0.5,
            p: 19.0,
            k: 4.5,
            epsilon: 0.01,
        }
    }
}

impl XDoGParams {
    pub fn with_sigma(self, sigma: f64) -> Self {
        XDoGParams { sigma, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.k > 1.0 && self.phi >= 0.0) {
            return Err(Error::Config(format!(
                "xdog needs sigma > 0, k > 1, phi >= 0 (got sigma={}, k={}, phi={})",
                self.sigma, self.k, self.phi
            )));
        }
        Ok(())
    }
}

/// Rec. 601 luma of a `3 x h x w` image (a single channel passes through).
pub fn luma(image: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = chw(image)?;
    let d = image.data();
    let hw = h * w;
    match c {
        1 => Ok(d.iter().map(|&v| v as f64).collect()),
        3 => Ok((0..hw)
            .map(|i| 0.299 * d[i] as f64 + 0.587 * d[hw + i] as f64 + 0.114 * d[2 * hw + i] as f64)
            .collect()),
        _ => Err(Error::Dimension(format!("expected 1 or 3 channels, got {c}"))),
    }
}

pub(crate) fn chw(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        s => Err(Error::Dimension(format!("expected a non-empty c x h x w image, got {s:?}"))),
    }
}

/// Normalized Gaussian taps, radius `ceil(3 sigma)` (at least 1).
pub fn gaussian_kernel_f64(sigma: f64) -> Vec<f64> {
    let radius = ((3.0 * sigma).ceil() as usize).max(1) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur of an `h x w` plane with reflect padding.
pub fn blur_plane(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel_f64(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * row[reflect_index(x as isize + t as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for (t, kv) in k.iter().enumerate() {
            let sy = reflect_index(y as isize + t as isize - r, h);
            let (dst, s) = (&mut out[y * w..(y + 1) * w], &tmp[sy * w..(sy + 1) * w]);
            for (o, v) in dst.iter_mut().zip(s) {
                *o += kv * v;
            }
        }
    }
    out
}

/// The sharpened response `(1+p) G_sigma(L) - p G_{k sigma}(L)`.
pub fn sharpened_response(l: &[f64], h: usize, w: usize, params: &XDoGParams) -> Vec<f64> {
    let g1 = blur_plane(l, h, w, params.sigma);
    let g2 = blur_plane(l, h, w, params.k * params.sigma);
    g1.iter()
        .zip(&g2)
        .map(|(a, b)| (1.0 + params.p) * a - params.p * b)
        .collect()
}

pub fn threshold(s: f64, params: &XDoGParams) -> f64 {
    if s >= params.epsilon {
        1.0
    } else {
        1.0 + (params.phi * (s - params.epsilon)).tanh()
    }
}

/// Line-art sketch (`1 x h x w`, lines dark) from a color or gray image.
pub fn xdog_extract(image: &Tensor, params: &XDoGParams) -> Result<Tensor> {
    params.validate()?;
    let (_, h, w) = chw(image)?;
    let l = luma(image)?;
    let s = sharpened_response(&l, h, w, params);
    let data = s.iter().map(|&v| threshold(v, params) as f32).collect();
    Tensor::new(&[1, h, w], data)
}
