use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::xdog::chw;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TpsParams {
    /// Control lattice extents (rows, cols).
    pub grid: (usize, usize),
    /// Largest control-point offset as a fraction of the image extent.
    pub max_displacement: f64,
    pub seed: u64,
}

impl Default for TpsParams {
    fn default() -> Self {
        TpsParams {
            grid: (4, 4),
            max_displacement: 0.08,
            seed: 0,
        }
    }
}

impl TpsParams {
    pub fn validate(&self) -> Result<()> {
        if self.grid.0 < 2 || self.grid.1 < 2 {
            return Err(Error::Config(format!("tps grid must be at least 2x2, got {:?}", self.grid)));
        }
        if !(0.0..=0.25).contains(&self.max_displacement) {
            return Err(Error::Config(format!(
                "tps max_displacement must lie in [0, 0.25], got {}",
                self.max_displacement
            )));
        }
        Ok(())
    }

    /// Control points on a uniform lattice over the unit square, `(x, y)`.
    pub fn lattice(&self) -> Vec<[f64; 2]> {
        let (gr, gc) = self.grid;
        let mut pts = Vec::with_capacity(gr * gc);
        for i in 0..gr {
            for j in 0..gc {
                pts.push([j as f64 / (gc - 1) as f64, i as f64 / (gr - 1) as f64]);
            }
        }
        pts
    }

    /// Seeded displacements, uniform in `±max_displacement` per axis.
    pub fn displacements(&self) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let m = self.max_displacement;
        (0..self.grid.0 * self.grid.1)
            .map(|_| {
                if m == 0.0 {
                    [0.0, 0.0]
                } else {
                    [rng.random_range(-m..=m), rng.random_range(-m..=m)]
                }
            })
            .collect()
    }
}

fn kernel(r2: f64) -> f64 {
    if r2 == 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// Thin-plate spline interpolating a 2-D displacement field.
#[derive(Clone, Debug)]
pub struct ThinPlateSpline {
    centers: Vec<[f64; 2]>,
    /// Per axis: radial weights followed by `[a0, ax, ay]`.
    coeffs: [Vec<f64>; 2],
}

impl ThinPlateSpline {
    pub fn fit(centers: &[[f64; 2]], values: &[[f64; 2]]) -> Result<Self> {
        let n = centers.len();
        if n < 3 || values.len() != n {
            return Err(Error::Solver(format!("tps needs >= 3 matched points, got {n}/{}", values.len())));
        }
        let mut m = DMatrix::<f64>::zeros(n + 3, n + 3);
        for i in 0..n {
            for j in 0..n {
                let (dx, dy) = (centers[i][0] - centers[j][0], centers[i][1] - centers[j][1]);
                m[(i, j)] = kernel(dx * dx + dy * dy);
            }
            let row = [1.0, centers[i][0], centers[i][1]];
            for (t, v) in row.into_iter().enumerate() {
                m[(i, n + t)] = v;
                m[(n + t, i)] = v;
            }
        }
        let lu = m.lu();
        let solve = |axis: usize| -> Result<Vec<f64>> {
            let mut rhs = DVector::<f64>::zeros(n + 3);
            for i in 0..n {
                rhs[i] = values[i][axis];
            }
            let x = lu
                .solve(&rhs)
                .ok_or_else(|| Error::Solver("singular thin-plate system".into()))?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Solver("thin-plate solution is not finite".into()));
            }
            Ok(x.iter().copied().collect())
        };
        Ok(ThinPlateSpline {
            centers: centers.to_vec(),
            coeffs: [solve(0)?, solve(1)?],
        })
    }

    pub fn eval(&self, p: [f64; 2]) -> [f64; 2] {
        let n = self.centers.len();
        let mut out = [0.0; 2];
        for (axis, c) in self.coeffs.iter().enumerate() {
            let mut v = c[n] + c[n + 1] * p[0] + c[n + 2] * p[1];
            for (k, q) in self.centers.iter().enumerate() {
                if c[k] != 0.0 {
                    let (dx, dy) = (p[0] - q[0], p[1] - q[1]);
                    v += c[k] * kernel(dx * dx + dy * dy);
                }
            }
            out[axis] = v;
        }
        out
    }
}

/// Bilinear sample of channel plane `plane` at pixel coordinates `(x, y)`,
/// replicating the border.
pub fn sample_bilinear(plane: &[f32], h: usize, w: usize, x: f64, y: f64) -> f32 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    if fx == 0.0 && fy == 0.0 {
        return plane[y0 * w + x0];
    }
    let at = |yy: usize, xx: usize| plane[yy * w + xx] as f64;
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

/// Backward warp: output pixel `p` reads the input at `p + f(p)` where `f`
/// interpolates the control displacements.
pub fn tps_warp(image: &Tensor, params: &TpsParams) -> Result<Tensor> {
    params.validate()?;
    let (c, h, w) = chw(image)?;
    let centers = params.lattice();
    let disp = params.displacements();
    warp_with(image, &centers, &disp, c, h, w)
}

/// Warp with explicit control points and displacements, in unit-square
/// coordinates.
pub fn tps_warp_with(image: &Tensor, centers: &[[f64; 2]], displacements: &[[f64; 2]]) -> Result<Tensor> {
    let (c, h, w) = chw(image)?;
    warp_with(image, centers, displacements, c, h, w)
}

fn warp_with(image: &Tensor, centers: &[[f64; 2]], disp: &[[f64; 2]], c: usize, h: usize, w: usize) -> Result<Tensor> {
    let spline = ThinPlateSpline::fit(centers, disp)?;
    let sx = (w.max(2) - 1) as f64;
    let sy = (h.max(2) - 1) as f64;
    let src = image.data();
    let hw = h * w;
    let mut out = vec![0.0f32; c * hw];
    for y in 0..h {
        for x in 0..w {
            let d = spline.eval([x as f64 / sx, y as f64 / sy]);
            let (px, py) = (x as f64 + d[0] * sx, y as f64 + d[1] * sy);
            for ch in 0..c {
                out[ch * hw + y * w + x] = sample_bilinear(&src[ch * hw..(ch + 1) * hw], h, w, px, py);
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}
