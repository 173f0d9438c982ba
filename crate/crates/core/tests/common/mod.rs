#![allow(dead_code)]

pub mod gradcheck;
pub mod checks;
pub mod data_checks;
pub mod metric_checks;
pub mod op_cases;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sga_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn_like(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

/// Color test card: a two-color gradient background with a few filled
/// rectangles and discs, `3 x h x w` in `[0, 1]`.
pub fn synthetic_image(seed: u64, h: usize, w: usize) -> Tensor {
    use rand::Rng;
    let mut r = rng(seed);
    let mut col = || [r.random::<f32>(), r.random::<f32>(), r.random::<f32>()];
    let (c0, c1) = (col(), col());
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let t = (x + y) as f32 / (h + w) as f32;
            for ch in 0..3 {
                data[ch * h * w + y * w + x] = c0[ch] * (1.0 - t) + c1[ch] * t;
            }
        }
    }
    let mut r = rng(seed ^ 0xABCD);
    for k in 0..4 {
        let c = [r.random::<f32>(), r.random::<f32>(), r.random::<f32>()];
        let (cy, cx) = (r.random_range(0..h), r.random_range(0..w));
        let rad = r.random_range(h / 8..h / 3) as isize;
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as isize - cy as isize, x as isize - cx as isize);
                let inside = if k % 2 == 0 {
                    dy * dy + dx * dx <= rad * rad
                } else {
                    dy.abs() <= rad && dx.abs() <= rad / 2
                };
                if inside {
                    for ch in 0..3 {
                        data[ch * h * w + y * w + x] = c[ch];
                    }
                }
            }
        }
    }
    Tensor::new(&[3, h, w], data).unwrap()
}
