//! Training-triple construction: XDoG sketch, jittered target and a
//! thin-plate-warped reference, plus PNG I/O.

mod jitter;
mod tps;
mod xdog;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use jitter::{apply_jitter, color_jitter, hsv_to_rgb, rgb_to_hsv, JitterFactors, JitterRanges};
pub use tps::{sample_bilinear, tps_warp, tps_warp_with, ThinPlateSpline, TpsParams};
pub use xdog::{
    blur_plane, gaussian_kernel_f64, luma, sharpened_response, threshold, xdog_extract, XDoGParams, SIGMA_CHOICES,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SplitMix64 finalizer over `(seed, stream)`; used to derive independent
/// per-image and per-stage seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SIGMA: u64 = 1;
const STREAM_JITTER: u64 = 2;
const STREAM_TPS: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
#[derive(Default)]
pub struct TripleConfig {
    pub xdog: XDoGParams,
    /// Pins the inner std instead of drawing it from [`SIGMA_CHOICES`].
    pub fixed_sigma: Option<f64>,
    pub jitter: JitterRanges,
    /// Grid and displacement; the seed is derived per triple.
    pub tps: TpsParams,
    /// Use the target itself as the reference (no warp).
    pub self_reference: bool,
}


#[derive(Clone, Debug, PartialEq)]
pub struct ImageTriple {
    /// `1 x h x w` line art.
    pub sketch: Tensor,
    /// `3 x h x w` warped, jittered color.
    pub reference: Tensor,
    /// `3 x h x w` jittered color.
    pub ground_truth: Tensor,
    pub seed: u64,
    pub sigma: f64,
}

pub fn pick_sigma(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SIGMA));
    SIGMA_CHOICES[rng.random_range(0..SIGMA_CHOICES.len())]
}

pub fn make_triple(image: &Tensor, seed: u64, cfg: &TripleConfig) -> Result<ImageTriple> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::Dimension(format!("make_triple expects 3 x h x w, got {:?}", image.shape())));
    }
    let sigma = cfg.fixed_sigma.unwrap_or_else(|| pick_sigma(seed));
    let sketch = xdog_extract(image, &cfg.xdog.with_sigma(sigma))?;
    let ground_truth = color_jitter(image, derive_seed(seed, STREAM_JITTER), &cfg.jitter)?;
    let reference = if cfg.self_reference {
        ground_truth.clone()
    } else {
        let tps = TpsParams {
            seed: derive_seed(seed, STREAM_TPS),
            ..cfg.tps
        };
        tps_warp(&ground_truth, &tps)?
    };
    Ok(ImageTriple {
        sketch,
        reference,
        ground_truth,
        seed,
        sigma,
    })
}

/// Reads a PNG as `3 x h x w` in `[0, 1]` (alpha dropped, gray expanded).
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * h * w + i] = px.0[ch] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1- or 3-channel image in `[0, 1]` as 8-bit PNG.
pub fn save_png(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = xdog::chw(image)?;
    let d = image.data();
    let hw = h * w;
    let res = match c {
        1 => image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([quantize(d[y as usize * w + x as usize])])
        })
        .save(path),
        3 => image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            image::Rgb([quantize(d[i]), quantize(d[hw + i]), quantize(d[2 * hw + i])])
        })
        .save(path),
        _ => return Err(Error::Dimension(format!("cannot save {c}-channel image"))),
    };
    res.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Area-averaging resize (box filter over the covered source cells when
/// shrinking, bilinear when growing).
pub fn resize(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = xdog::chw(image)?;
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Dimension("resize to an empty extent".into()));
    }
    let hw = h * w;
    let mut out = vec![0.0f32; c * out_h * out_w];
    if out_h <= h && out_w <= w {
        for ch in 0..c {
            let plane = &image.data()[ch * hw..(ch + 1) * hw];
            for oy in 0..out_h {
                let (y0, y1) = crate::autodiff::kernels::adaptive_window(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = crate::autodiff::kernels::adaptive_window(ox, w, out_w);
                    let mut s = 0.0f64;
                    for y in y0..y1 {
                        s += plane[y * w + x0..y * w + x1].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    out[ch * out_h * out_w + oy * out_w + ox] = (s / ((y1 - y0) * (x1 - x0)) as f64) as f32;
                }
            }
        }
    } else {
        let sy = (h as f64 - 1.0) / (out_h.max(2) - 1) as f64;
        let sx = (w as f64 - 1.0) / (out_w.max(2) - 1) as f64;
        for ch in 0..c {
            let plane = &image.data()[ch * hw..(ch + 1) * hw];
            for oy in 0..out_h {
                for ox in 0..out_w {
                    out[ch * out_h * out_w + oy * out_w + ox] =
                        sample_bilinear(plane, h, w, ox as f64 * sx, oy as f64 * sy);
                }
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Sorted PNG files directly inside `dir`.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub const MANIFEST_HEADER: &str = "source,seed,sigma,sketch,reference,ground_truth";

/// One row of the triple manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct TripleRecord {
    pub source: PathBuf,
    pub seed: u64,
    pub sigma: f64,
    pub sketch: PathBuf,
    pub reference: PathBuf,
    pub ground_truth: PathBuf,
}

impl TripleRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.source.display(),
            self.seed,
            self.sigma,
            self.sketch.display(),
            self.reference.display(),
            self.ground_truth.display()
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        let [source, seed, sigma, sketch, reference, gt] = f.as_slice() else {
            return Err(Error::Config(format!("malformed manifest row {line:?}")));
        };
        let num = |s: &str| Error::Config(format!("bad number {s:?} in manifest row"));
        Ok(TripleRecord {
            source: source.into(),
            seed: seed.parse().map_err(|_| num(seed))?,
            sigma: sigma.parse().map_err(|_| num(sigma))?,
            sketch: sketch.into(),
            reference: reference.into(),
            ground_truth: gt.into(),
        })
    }
}

/// Builds and writes the triple of `source` into `out_dir`, returning its
/// manifest row.
pub fn write_triple(source: &Path, image: &Tensor, seed: u64, cfg: &TripleConfig, out_dir: &Path) -> Result<TripleRecord> {
    let t = make_triple(image, seed, cfg)?;
    let stem = source
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let rec = TripleRecord {
        source: source.to_path_buf(),
        seed,
        sigma: t.sigma,
        sketch: out_dir.join(format!("{stem}_sketch.png")),
        reference: out_dir.join(format!("{stem}_ref.png")),
        ground_truth: out_dir.join(format!("{stem}_gt.png")),
    };
    save_png(&rec.sketch, &t.sketch)?;
    save_png(&rec.reference, &t.reference)?;
    save_png(&rec.ground_truth, &t.ground_truth)?;
    Ok(rec)
}
