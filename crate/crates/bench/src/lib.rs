//! Deterministic fixtures for the benchmarks.

use sga_core::Tensor;

/// Smooth pseudo-random values in `[-1, 1]`, no RNG needed.
pub fn wave(shape: &[usize], phase: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as f32 * 0.731 + phase).sin() * 1.37).sin()).collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// A `3 x h x w` image in `[0, 1]` with some edges for XDoG to find.
pub fn test_card(h: usize, w: usize) -> Tensor {
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let band = ((x / 16 + y / 16) % 2) as f32;
            for c in 0..3 {
                data[c * h * w + y * w + x] = 0.2 + 0.6 * band * (c as f32 + 1.0) / 3.0;
            }
        }
    }
    Tensor::new(&[3, h, w], data).expect("shape matches")
}
