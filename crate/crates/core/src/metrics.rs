//! SSIM and the Fréchet feature distance (`ffd`) over the in-repo extractor.
//! `ffd` is not FID: it uses the fixed random-weight extractor, so its values
//! are only comparable with other `ffd` values.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::FeatureExtractor;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    /// Normalized 1-D taps of the window.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as isize;
        let mut k: Vec<f64> = (-r..=r)
            .map(|i| (-((i * i) as f64) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= s);
        k
    }
}

/// Separable weighted window means over every fully contained window.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|t| k[t] * src[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|t| k[t] * tmp[(y + t) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean windowed SSIM, averaged over channels. Images are `c x h x w`.
pub fn ssim(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() != 3 {
        return Err(Error::shapes("ssim expects equal c x h x w images", a.shape(), b.shape()));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if h < p.window || w < p.window || c == 0 {
        return Err(Error::Dimension(format!(
            "ssim window {} does not fit a {h}x{w} image",
            p.window
        )));
    }
    let k = p.taps();
    let c1 = (p.k1 * p.dynamic_range).powi(2);
    let c2 = (p.k2 * p.dynamic_range).powi(2);
    let hw = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a.data()[ch * hw..(ch + 1) * hw].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data()[ch * hw..(ch + 1) * hw].iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, oh, ow) = filter_valid(&x, h, w, &k);
        let (my, ..) = filter_valid(&y, h, w, &k);
        let (exx, ..) = filter_valid(&xx, h, w, &k);
        let (eyy, ..) = filter_valid(&yy, h, w, &k);
        let (exy, ..) = filter_valid(&xy, h, w, &k);
        let mut s = 0.0;
        for i in 0..oh * ow {
            let (ma, mb) = (mx[i], my[i]);
            let va = exx[i] - ma * ma;
            let vb = eyy[i] - mb * mb;
            let cov = exy[i] - ma * mb;
            s += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += s / (oh * ow) as f64;
    }
    Ok(total / c as f64)
}

fn mean_cov(x: &[Vec<f64>]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = x.len();
    if n < 2 {
        return Err(Error::Contract(format!("a feature set needs >= 2 samples, got {n}")));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::Dimension("feature rows must share a positive width".into()));
    }
    let mut mu = vec![0.0; d];
    for r in x {
        for (m, v) in mu.iter_mut().zip(r) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in x {
        for i in 0..d {
            let di = r[i] - mu[i];
            for j in 0..=i {
                cov[(i, j)] += di * (r[j] - mu[j]);
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok((mu, cov))
}

/// Square root of a symmetric PSD matrix. Eigenvalues slightly below zero
/// (within `1e-8` relative to the largest magnitude) are clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-8 * scale;
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -tol {
            return Err(Error::Solver(format!("matrix is not positive semidefinite (eigenvalue {v})")));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})` over feature rows,
/// with sample (n - 1) covariances.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, s_a) = mean_cov(a)?;
    let (mu_b, s_b) = mean_cov(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::Dimension(format!("feature widths {} vs {}", mu_a.len(), mu_b.len())));
    }
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(p, q)| (p - q) * (p - q)).sum();
    // tr((S_a S_b)^{1/2}) = tr((S_a^{1/2} S_b S_a^{1/2})^{1/2}), a symmetric form.
    let ra = psd_sqrt(&s_a)?;
    let inner = &ra * &s_b * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = psd_sqrt(&inner)?.trace();
    Ok((mean_term + s_a.trace() + s_b.trace() - 2.0 * cross).max(0.0))
}

/// Fréchet distance between extractor embeddings of two image sets
/// (`3 x h x w` each).
pub fn frechet_feature_distance(set_a: &[Tensor], set_b: &[Tensor], fx: &FeatureExtractor) -> Result<f64> {
    if set_a.len() < 2 || set_b.len() < 2 {
        return Err(Error::Contract(format!(
            "ffd needs >= 2 images per set, got {} and {}",
            set_a.len(),
            set_b.len()
        )));
    }
    frechet_distance(&embed_all(set_a, fx)?, &embed_all(set_b, fx)?)
}

fn embed_all(set: &[Tensor], fx: &FeatureExtractor) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(set.len());
    for img in set {
        let batch = img.reshape(&[1, img.shape()[0], img.shape()[1], img.shape()[2]])?;
        rows.extend(fx.embed(&batch)?);
    }
    Ok(rows)
}

pub const METRICS_CSV_HEADER: &str = "pair_id,ssim,ffd";

/// One `pair_id,ssim,` row per pair and a final `mean,<ssim>,<ffd>` row.
pub fn write_metrics_csv<W: Write>(pairs: &[(String, f64)], ffd: f64, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{METRICS_CSV_HEADER}")?;
    for (id, s) in pairs {
        writeln!(out, "{id},{s},")?;
    }
    let mean = if pairs.is_empty() {
        f64::NAN
    } else {
        pairs.iter().map(|(_, s)| s).sum::<f64>() / pairs.len() as f64
    };
    writeln!(out, "mean,{mean},{ffd}")
}
