use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::xdog::chw;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Half-widths of the perturbation ranges. Brightness, contrast and
/// saturation factors are drawn from `[1 - r, 1 + r]`; hue shifts from
/// `[-hue, hue]` turns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterRanges {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for JitterRanges {
    fn default() -> Self {
        JitterRanges {
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
        }
    }
}

impl JitterRanges {
    pub const NONE: JitterRanges = JitterRanges {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        hue: 0.0,
    };
}

/// Concrete factors applied by [`apply_jitter`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterFactors {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

impl JitterFactors {
    pub const IDENTITY: JitterFactors = JitterFactors {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
    };

    pub fn sample(ranges: &JitterRanges, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut factor = |r: f64| if r > 0.0 { rng.random_range(1.0 - r..=1.0 + r) as f32 } else { 1.0 };
        let brightness = factor(ranges.brightness);
        let contrast = factor(ranges.contrast);
        let saturation = factor(ranges.saturation);
        let hue = if ranges.hue > 0.0 {
            rng.random_range(-ranges.hue..=ranges.hue) as f32
        } else {
            0.0
        };
        JitterFactors {
            brightness,
            contrast,
            saturation,
            hue,
        }
    }
}

pub fn color_jitter(image: &Tensor, seed: u64, ranges: &JitterRanges) -> Result<Tensor> {
    apply_jitter(image, &JitterFactors::sample(ranges, seed))
}

/// Applies brightness, contrast, saturation, then hue. Neutral factors are
/// skipped so they leave the image bitwise unchanged.
pub fn apply_jitter(image: &Tensor, f: &JitterFactors) -> Result<Tensor> {
    let (c, h, w) = chw(image)?;
    if c != 3 {
        return Err(Error::Dimension(format!("color jitter needs 3 channels, got {c}")));
    }
    let hw = h * w;
    let mut d = image.data().to_vec();
    let gray = |d: &[f32], i: usize| 0.299 * d[i] + 0.587 * d[hw + i] + 0.114 * d[2 * hw + i];

    if f.brightness != 1.0 {
        d.iter_mut().for_each(|v| *v = (*v * f.brightness).clamp(0.0, 1.0));
    }
    if f.contrast != 1.0 {
        let mean = ((0..hw).map(|i| gray(&d, i) as f64).sum::<f64>() / hw as f64) as f32;
        d.iter_mut()
            .for_each(|v| *v = ((*v - mean) * f.contrast + mean).clamp(0.0, 1.0));
    }
    if f.saturation != 1.0 {
        for i in 0..hw {
            let g = gray(&d, i);
            for ch in 0..3 {
                let v = &mut d[ch * hw + i];
                *v = ((*v - g) * f.saturation + g).clamp(0.0, 1.0);
            }
        }
    }
    if f.hue != 0.0 {
        for i in 0..hw {
            let (hh, s, v) = rgb_to_hsv(d[i], d[hw + i], d[2 * hw + i]);
            let (r, g, b) = hsv_to_rgb((hh + f.hue).rem_euclid(1.0), s, v);
            d[i] = r.clamp(0.0, 1.0);
            d[hw + i] = g.clamp(0.0, 1.0);
            d[2 * hw + i] = b.clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[3, h, w], d)
}

/// Hue in turns `[0, 1)`.
pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return (0.0, s, max);
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    ((h / 6.0).rem_euclid(1.0), s, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}
