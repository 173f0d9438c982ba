//! Naive oracles for SSIM and the Fréchet distance.

use super::checks::Check;
use super::{rng, synthetic_image};
use rand::Rng;
use sga_core::metrics::{frechet_distance, frechet_feature_distance, ssim, SsimParams};
use sga_core::model::FeatureExtractor;
use sga_core::Tensor;

fn fail<T>(msg: impl Into<String>) -> std::result::Result<T, String> {
    Err(msg.into())
}

/// Windowed SSIM with the full 2-D Gaussian weights written out per window.
pub fn ssim_naive(a: &Tensor, b: &Tensor) -> f64 {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (n, sigma) = (11usize, 1.5f64);
    let r = (n / 2) as f64;
    let mut wts = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (dy, dx) = (i as f64 - r, j as f64 - r);
            wts[i * n + j] = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
        }
    }
    let s: f64 = wts.iter().sum();
    wts.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa = |y: usize, x: usize| a.data()[ch * h * w + y * w + x] as f64;
        let pb = |y: usize, x: usize| b.data()[ch * h * w + y * w + x] as f64;
        for y0 in 0..=h - n {
            for x0 in 0..=w - n {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let k = wts[i * n + j];
                        let (u, v) = (pa(y0 + i, x0 + j), pb(y0 + i, x0 + j));
                        ma += k * u;
                        mb += k * v;
                        saa += k * u * u;
                        sbb += k * v * v;
                        sab += k * u * v;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

pub fn ssim_against_oracle() -> Check {
    let a = synthetic_image(1, 24, 20);
    let mut r = rng(2);
    let noisy = a.data().iter().map(|&v| (v + r.random_range(-0.05f32..0.05)).clamp(0.0, 1.0)).collect();
    let b = Tensor::new(a.shape(), noisy).unwrap();
    let p = SsimParams::default();
    let got = ssim(&a, &b, &p).map_err(|e| e.to_string())?;
    let want = ssim_naive(&a, &b);
    if (got - want).abs() > 1e-9 {
        return fail(format!("ssim {got} vs naive {want}"));
    }
    if !(got > 0.9 && got < 1.0) {
        return fail(format!("mild noise gave ssim {got}"));
    }
    let back = ssim(&b, &a, &p).map_err(|e| e.to_string())?;
    if (back - got).abs() > 1e-12 {
        return fail("ssim not symmetric");
    }
    if ssim(&a, &a, &p).map_err(|e| e.to_string())? != 1.0 {
        return fail("ssim(a, a) != 1");
    }
    Ok(format!("ssim {got:.6} matches the naive window sum, symmetric, self = 1"))
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// In one dimension the distance is `(m1-m2)^2 + (s1-s2)^2`.
pub fn frechet_closed_forms() -> Check {
    let mut r = rng(4);
    let a: Vec<f64> = (0..50).map(|_| r.random_range(-1.0..2.0)).collect();
    let b: Vec<f64> = (0..70).map(|_| r.random_range(0.0..5.0)).collect();
    let (ma, va) = mean_var(&a);
    let (mb, vb) = mean_var(&b);
    let want = (ma - mb).powi(2) + (va.sqrt() - vb.sqrt()).powi(2);
    let col = |v: &[f64]| v.iter().map(|&x| vec![x]).collect::<Vec<_>>();
    let got = frechet_distance(&col(&a), &col(&b)).map_err(|e| e.to_string())?;
    if (got - want).abs() > 1e-9 * want.max(1.0) {
        return fail(format!("1-D distance {got} vs {want}"));
    }
    // Independent axes: the distance is the sum of the 1-D distances.
    let pair = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(&p, &q)| vec![p, q]).collect::<Vec<_>>();
    let a2: Vec<f64> = (0..50).map(|_| r.random_range(0.0..1.0)).collect();
    let b2: Vec<f64> = (0..70).map(|_| r.random_range(0.0..3.0)).collect();
    let d2 = frechet_distance(&pair(&a, &a2), &pair(&b, &b2[..50])).map_err(|e| e.to_string())?;
    let sym = frechet_distance(&pair(&b, &b2[..50]), &pair(&a, &a2)).map_err(|e| e.to_string())?;
    if (d2 - sym).abs() > 1e-9 * d2.max(1.0) {
        return fail(format!("not symmetric: {d2} vs {sym}"));
    }
    let self_d = frechet_distance(&col(&a), &col(&a)).map_err(|e| e.to_string())?;
    if self_d.abs() > 1e-9 {
        return fail(format!("self distance {self_d}"));
    }
    if frechet_distance(&col(&a[..1]), &col(&b)).is_ok() {
        return fail("a single sample was accepted");
    }
    Ok(format!("1-D closed form within {:.1e}, symmetric, self 0", (got - want).abs()))
}

pub fn feature_distance_identity() -> Check {
    let fx = FeatureExtractor::pinned().map_err(|e| e.to_string())?;
    let set: Vec<Tensor> = (0..4).map(|s| synthetic_image(s, 32, 32)).collect();
    let other: Vec<Tensor> = (10..14).map(|s| synthetic_image(s, 32, 32)).collect();
    let same = frechet_feature_distance(&set, &set, &fx).map_err(|e| e.to_string())?;
    let diff = frechet_feature_distance(&set, &other, &fx).map_err(|e| e.to_string())?;
    if same.abs() > 1e-6 || diff <= same {
        return fail(format!("ffd same {same}, different {diff}"));
    }
    Ok(format!("ffd self {same:.1e}, across sets {diff:.3e}"))
}
