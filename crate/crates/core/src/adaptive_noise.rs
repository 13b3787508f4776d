//! Gradient-driven, spatially varying latent noise.

use osr_autodiff::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::image::{ColorSpace, ImagePlane};

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub fn to_grayscale(img: &ImagePlane) -> Result<ImagePlane> {
    if img.space() != ColorSpace::Rgb {
        return Err(Error::Format("to_grayscale expects an RGB image".into()));
    }
    let n = img.height() * img.width();
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let data = (0..n)
        .map(|i| (LUMA[0] * r[i] as f64 + LUMA[1] * g[i] as f64 + LUMA[2] * b[i] as f64) as f32)
        .collect();
    ImagePlane::new(img.height(), img.width(), ColorSpace::Luma, data)
}

/// Row-major 2D array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.cols + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }
}

/// Sobel magnitudes, same size as the source image.
pub type GradientMap = Grid;

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// `√(Gx² + Gy²)` with 3×3 Sobel kernels and replicate padding.
pub fn sobel_gradient(gray: &ImagePlane) -> Result<GradientMap> {
    if gray.space() != ColorSpace::Luma {
        return Err(Error::Format("sobel_gradient expects a single-channel image".into()));
    }
    let p: Vec<f64> = gray.data().iter().map(|&v| v as f64).collect();
    Ok(sobel_plane(&p, gray.height(), gray.width()))
}

pub(crate) fn sobel_plane(p: &[f64], h: usize, w: usize) -> GradientMap {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        p[y * w + x]
    };
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut gx, mut gy) = (0.0, 0.0);
            for dy in 0..3 {
                for dx in 0..3 {
                    let v = at(y + dy as isize - 1, x + dx as isize - 1);
                    gx += SOBEL_X[dy][dx] * v;
                    gy += SOBEL_Y[dy][dx] * v;
                }
            }
            values.push((gx * gx + gy * gy).sqrt());
        }
    }
    Grid {
        rows: h,
        cols: w,
        values,
    }
}

/// Mean over non-overlapping `patch×patch` blocks.
pub fn patch_average(g: &GradientMap, patch: usize) -> Result<Grid> {
    if patch == 0 || g.rows % patch != 0 || g.cols % patch != 0 {
        return Err(Error::Shape(format!(
            "{}x{} map is not divisible into {patch}x{patch} patches",
            g.rows, g.cols
        )));
    }
    let (rows, cols) = (g.rows / patch, g.cols / patch);
    let mut values = vec![0.0; rows * cols];
    for y in 0..g.rows {
        for x in 0..g.cols {
            values[(y / patch) * cols + x / patch] += g.values[y * g.cols + x];
        }
    }
    let inv = 1.0 / (patch * patch) as f64;
    values.iter_mut().for_each(|v| *v *= inv);
    Ok(Grid { rows, cols, values })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RampParams {
    pub g_lo: f64,
    pub g_hi: f64,
    pub w_min: f64,
    pub w_max: f64,
}

impl Default for RampParams {
    fn default() -> Self {
        Self {
            g_lo: 0.02,
            g_hi: 0.25,
            w_min: 0.5,
            w_max: 1.0,
        }
    }
}

impl RampParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.g_lo && self.g_lo < self.g_hi && 0.0 < self.w_min && self.w_min <= self.w_max) {
            return Err(Error::Config(format!("invalid ramp parameters {self:?}")));
        }
        Ok(())
    }

    pub fn apply(&self, g: f64) -> f64 {
        if g <= self.g_lo {
            self.w_min
        } else if g >= self.g_hi {
            self.w_max
        } else {
            self.w_min + (self.w_max - self.w_min) * (g - self.g_lo) / (self.g_hi - self.g_lo)
        }
    }
}

/// Per-cell noise scale, in `[w_min, w_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub grid: Grid,
    pub params: RampParams,
}

/// Clamped linear ramp from `(g_lo, w_min)` to `(g_hi, w_max)`.
pub fn piecewise_map(means: &Grid, params: RampParams) -> Result<WeightMap> {
    params.validate()?;
    Ok(WeightMap {
        grid: Grid {
            rows: means.rows,
            cols: means.cols,
            values: means.values.iter().map(|&g| params.apply(g)).collect(),
        },
        params,
    })
}

/// Grayscale → Sobel → patch mean → ramp.
pub fn weight_map(x_l: &ImagePlane, patch: usize, params: RampParams) -> Result<WeightMap> {
    let gray = to_grayscale(x_l)?;
    let g = sobel_gradient(&gray)?;
    piecewise_map(&patch_average(&g, patch)?, params)
}

/// Weight grid resampled by nearest neighbour to `h×w`.
pub fn resample_nearest(weights: &WeightMap, h: usize, w: usize) -> Result<Grid> {
    let g = &weights.grid;
    let compatible = |a: usize, b: usize| a > 0 && b > 0 && (a % b == 0 || b % a == 0);
    if !compatible(h, g.rows) || !compatible(w, g.cols) {
        return Err(Error::Shape(format!(
            "latent {h}x{w} is not a multiple or divisor of the {}x{} weight grid",
            g.rows, g.cols
        )));
    }
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            values.push(g.get(y * g.rows / h, x * g.cols / w));
        }
    }
    Ok(Grid {
        rows: h,
        cols: w,
        values,
    })
}

/// `ε_a = W ⊙ ε` with `ε ~ N(0, I)` at `channels×h×w`; the weight is shared across channels.
pub fn synthesize_noise(
    weights: &WeightMap,
    channels: usize,
    h: usize,
    w: usize,
    rng: &mut impl Rng,
) -> Result<Tensor<f32>> {
    let cell = resample_nearest(weights, h, w)?;
    let mut data = Vec::with_capacity(channels * h * w);
    for _ in 0..channels {
        for &wt in &cell.values {
            let e: f64 = rng.sample(StandardNormal);
            data.push((wt * e) as f32);
        }
    }
    Ok(Tensor::from_vec(&[channels, h, w], data).expect("shape"))
}

/// Standard normal noise of the same layout, for the non-adaptive ablation.
pub fn standard_noise(channels: usize, h: usize, w: usize, rng: &mut impl Rng) -> Tensor<f32> {
    Tensor::from_fn(&[channels, h, w], |_| {
        let e: f64 = rng.sample(StandardNormal);
        e as f32
    })
}

/// Single-channel plane of the weights; `save_png` stores `value · 255` rounded.
pub fn weights_to_image(weights: &WeightMap) -> ImagePlane {
    let g = &weights.grid;
    ImagePlane::new(
        g.rows,
        g.cols,
        ColorSpace::Luma,
        g.values.iter().map(|&v| v as f32).collect(),
    )
    .expect("grid shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grayscale_examples() {
        let white = ImagePlane::filled(2, 2, ColorSpace::Rgb, 1.0);
        assert!(to_grayscale(&white).unwrap().data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        let red = ImagePlane::from_fn(2, 2, ColorSpace::Rgb, |c, _, _| if c == 0 { 1.0 } else { 0.0 });
        assert!(to_grayscale(&red).unwrap().data().iter().all(|&v| (v - 0.299).abs() < 1e-6));
        assert!(to_grayscale(&to_grayscale(&red).unwrap()).is_err());
    }

    #[test]
    fn step_edge_has_magnitude_four() {
        let img = ImagePlane::from_fn(6, 6, ColorSpace::Luma, |_, _, x| if x >= 3 { 1.0 } else { 0.0 });
        let g = sobel_gradient(&img).unwrap();
        for y in 1..5 {
            assert_eq!(g.get(y, 2), 4.0);
            assert_eq!(g.get(y, 3), 4.0);
            assert_eq!(g.get(y, 0), 0.0);
            assert_eq!(g.get(y, 5), 0.0);
        }
    }

    #[test]
    fn ramp_examples() {
        let p = RampParams::default();
        let grid = |v: f64| Grid {
            rows: 1,
            cols: 2,
            values: vec![v; 2],
        };
        assert!(piecewise_map(&grid(0.0), p).unwrap().grid.values.iter().all(|&w| w == 0.5));
        assert!(piecewise_map(&grid(9.0), p).unwrap().grid.values.iter().all(|&w| w == 1.0));
        let mid = piecewise_map(&grid((p.g_lo + p.g_hi) / 2.0), p).unwrap();
        assert!((mid.grid.values[0] - 0.75).abs() < 1e-12);
        let bad = RampParams { g_lo: 0.3, ..p };
        assert!(matches!(piecewise_map(&grid(0.0), bad), Err(Error::Config(_))));
    }

    #[test]
    fn nearest_resampling_expands_cells() {
        let w = WeightMap {
            grid: Grid {
                rows: 2,
                cols: 2,
                values: vec![1.0, 2.0, 3.0, 4.0],
            },
            params: RampParams::default(),
        };
        let r = resample_nearest(&w, 4, 4).unwrap();
        assert_eq!(r.values[..4], [1.0, 1.0, 2.0, 2.0]);
        assert_eq!(r.values[12..], [3.0, 3.0, 4.0, 4.0]);
        assert!(resample_nearest(&w, 3, 4).is_err());
    }
}
