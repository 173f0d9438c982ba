//! Independent oracles for the triple pipeline.

use super::checks::Check;
use super::synthetic_image;
use sga_core::data::{make_triple, pick_sigma, sharpened_response, tps_warp_with, xdog_extract, TripleConfig, SIGMA_CHOICES};
use sga_core::{Tensor, TpsParams, XDoGParams};
use std::time::Instant;

fn fail<T>(msg: impl Into<String>) -> std::result::Result<T, String> {
    Err(msg.into())
}

fn mirror(i: isize, n: usize) -> usize {
    // Mirror without repeating the edge sample: -1 -> 1, n -> n - 2.
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

fn blur_1d(row: &[f64], sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let taps: Vec<f64> = (-r..=r).map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    (0..row.len() as isize)
        .map(|x| (-r..=r).map(|t| taps[(t + r) as usize] / norm * row[mirror(x + t, row.len())]).sum())
        .collect()
}

/// A vertical step edge has constant columns, so the 2-D response reduces
/// to a 1-D difference of Gaussians along each row.
pub fn xdog_step_edge() -> Check {
    let (h, w) = (6, 40);
    let profile: Vec<f64> = (0..w).map(|x| if x < w / 2 { 0.2 } else { 0.8 }).collect();
    let l: Vec<f64> = (0..h).flat_map(|_| profile.iter().copied()).collect();
    let p = XDoGParams::default();
    let got = sharpened_response(&l, h, w, &p);
    let g1 = blur_1d(&profile, p.sigma);
    let g2 = blur_1d(&profile, p.k * p.sigma);
    let want: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| (1.0 + p.p) * a - p.p * b).collect();
    let mut worst = 0f64;
    for y in 0..h {
        for x in 0..w {
            worst = worst.max((got[y * w + x] - want[x]).abs());
        }
    }
    if worst > 1e-9 {
        return fail(format!("edge response off the 1-D oracle by {worst:.2e}"));
    }
    let gray = Tensor::new(&[1, h, w], l.iter().map(|&v| v as f32).collect()).unwrap();
    let sketch = xdog_extract(&gray, &p).map_err(|e| e.to_string())?;
    let row = &sketch.data()[..w];
    let dark: Vec<usize> = (0..w).filter(|&x| row[x] < 0.5).collect();
    // Lines fall on the darker side, within the outer kernel's reach.
    let reach = (3.0 * p.k * p.sigma).ceil() as usize;
    if dark.is_empty() || dark.iter().any(|&x| x >= w / 2 || w / 2 - x > reach) {
        return fail(format!("dark pixels {dark:?} not at the edge"));
    }
    Ok(format!("step edge within {worst:.1e}, line at columns {dark:?}"))
}

/// Sketches are binary within 1e-6 under the steep default ramp, and flat
/// regions are white.
pub fn xdog_output_range(seed: u64) -> Check {
    let img = synthetic_image(seed, 64, 64);
    let s = xdog_extract(&img, &XDoGParams::default()).map_err(|e| e.to_string())?;
    if s.shape() != [1, 64, 64] {
        return fail(format!("sketch shape {:?}", s.shape()));
    }
    if s.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return fail("sketch value outside [0, 1]");
    }
    let soft = s.data().iter().filter(|&&v| v > 1e-6 && v < 1.0 - 1e-6).count();
    if soft > 0 {
        return fail(format!("{soft} non-binary pixels"));
    }
    let flat = Tensor::full(&[3, 16, 16], 0.5);
    let fs = xdog_extract(&flat, &XDoGParams::default()).map_err(|e| e.to_string())?;
    if fs.data().iter().any(|&v| v != 1.0) {
        return fail("flat image produced lines");
    }
    Ok(format!("{} pixels binary, flat image white", s.numel()))
}

/// Equal control displacements give a pure translation, checked against a
/// hand-written bilinear sampler with border replication.
pub fn tps_translation() -> Check {
    let (h, w) = (20, 24);
    let img = synthetic_image(3, h, w);
    let centers = TpsParams::default().lattice();
    let t = [0.037, -0.052];
    let disp = vec![t; centers.len()];
    let out = tps_warp_with(&img, &centers, &disp).map_err(|e| e.to_string())?;
    let (sx, sy) = ((w - 1) as f64, (h - 1) as f64);
    let at = |c: usize, y: usize, x: usize| img.data()[c * h * w + y * w + x] as f64;
    let mut worst = 0f64;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let px = (x as f64 + t[0] * sx).clamp(0.0, sx);
                let py = (y as f64 + t[1] * sy).clamp(0.0, sy);
                let (x0, y0) = (px.floor() as usize, py.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (px - x0 as f64, py - y0 as f64);
                let want = (1.0 - fy) * ((1.0 - fx) * at(c, y0, x0) + fx * at(c, y0, x1))
                    + fy * ((1.0 - fx) * at(c, y1, x0) + fx * at(c, y1, x1));
                worst = worst.max((out.data()[c * h * w + y * w + x] as f64 - want).abs());
            }
        }
    }
    if worst > 1e-6 {
        return fail(format!("translation off the bilinear oracle by {worst:.2e}"));
    }
    let ident = tps_warp_with(&img, &centers, &vec![[0.0, 0.0]; centers.len()]).map_err(|e| e.to_string())?;
    if !ident.bit_eq(&img) {
        return fail("zero displacement changed the image");
    }
    Ok(format!("translation within {worst:.1e}, zero warp exact"))
}

pub fn triple_determinism() -> Check {
    let img = synthetic_image(9, 48, 48);
    let cfg = TripleConfig::default();
    let a = make_triple(&img, 1234, &cfg).map_err(|e| e.to_string())?;
    let b = make_triple(&img, 1234, &cfg).map_err(|e| e.to_string())?;
    let c = make_triple(&img, 1235, &cfg).map_err(|e| e.to_string())?;
    if !(a.sketch.bit_eq(&b.sketch) && a.reference.bit_eq(&b.reference) && a.ground_truth.bit_eq(&b.ground_truth)) {
        return fail("same seed gave different triples");
    }
    if a.reference.bit_eq(&c.reference) && a.ground_truth.bit_eq(&c.ground_truth) {
        return fail("different seeds gave the same triple");
    }
    if a.reference.bit_eq(&a.ground_truth) {
        return fail("reference was not warped");
    }
    let s = TripleConfig {
        self_reference: true,
        ..cfg
    };
    let d = make_triple(&img, 1234, &s).map_err(|e| e.to_string())?;
    if !d.reference.bit_eq(&d.ground_truth) || !d.sketch.bit_eq(&a.sketch) {
        return fail("self-reference triple mismatch");
    }
    Ok("bitwise repeatable, seed sensitive, self-reference exact".into())
}

/// Each inner std should come up about a third of the time.
pub fn sigma_frequencies(n: u64) -> Check {
    let mut counts = [0u64; 3];
    for s in 0..n {
        let sigma = pick_sigma(s);
        let i = SIGMA_CHOICES.iter().position(|&c| c == sigma).ok_or("sigma outside the choices")?;
        counts[i] += 1;
    }
    // Five binomial standard deviations.
    let (mean, sd) = (n as f64 / 3.0, (n as f64 * (2.0 / 9.0)).sqrt());
    if counts.iter().any(|&c| (c as f64 - mean).abs() > 5.0 * sd) {
        return fail(format!("sigma counts {counts:?} over {n}"));
    }
    Ok(format!("sigma counts {counts:?} over {n}"))
}

/// Best of three, so one scheduler hiccup does not decide it.
pub fn triple_timing_ms(size: usize) -> f64 {
    let img = synthetic_image(77, size, size);
    let cfg = TripleConfig::default();
    (0..3)
        .map(|i| {
            let t = Instant::now();
            make_triple(&img, i, &cfg).unwrap();
            t.elapsed().as_secs_f64() * 1e3
        })
        .fold(f64::INFINITY, f64::min)
}
