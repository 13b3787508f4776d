//! Full-reference fidelity metrics and a gradient-energy sharpness proxy, all on luma.

use crate::adaptive_noise::{sobel_plane, LUMA};
use crate::error::{Error, Result};
use crate::image::{ColorSpace, ImagePlane};

pub const PSNR_CAP: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub psnr_y: f64,
    pub ssim: f64,
    pub hf_energy: f64,
    pub in_mask_attention: Option<f64>,
}

/// Luma in `f64`; luma images pass through.
pub fn luma(img: &ImagePlane) -> Vec<f64> {
    match img.space() {
        ColorSpace::Luma => img.data().iter().map(|&v| v as f64).collect(),
        ColorSpace::Rgb => {
            let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
            (0..r.len())
                .map(|i| LUMA[0] * r[i] as f64 + LUMA[1] * g[i] as f64 + LUMA[2] * b[i] as f64)
                .collect()
        }
    }
}

/// `10·log10(1 / MSE)` on luma with peak 1, capped at [`PSNR_CAP`].
pub fn psnr_y(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    a.same_shape(b)?;
    let (ya, yb) = (luma(a), luma(b));
    let mse = ya.iter().zip(&yb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / ya.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

pub(crate) fn gaussian_window() -> [[f64; SSIM_WIN]; SSIM_WIN] {
    let r = (SSIM_WIN / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WIN)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    std::array::from_fn(|y| std::array::from_fn(|x| g[y] * g[x] / (s * s)))
}

/// Mean SSIM over all fully-contained 11×11 Gaussian windows (σ = 1.5) on luma.
pub fn ssim(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    a.same_shape(b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(Error::Shape(format!("SSIM needs at least {SSIM_WIN}x{SSIM_WIN}, got {h}x{w}")));
    }
    let (ya, yb) = (luma(a), luma(b));
    let win = gaussian_window();
    // separable filtering of the five moment images
    let g1: Vec<f64> = (0..SSIM_WIN).map(|i| win[i].iter().sum()).collect();
    let filt = |img: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let (oh, ow) = (h - SSIM_WIN + 1, w - SSIM_WIN + 1);
        let mut rows = vec![0.0; h * ow];
        for y in 0..h {
            for x in 0..ow {
                rows[y * ow + x] = (0..SSIM_WIN).map(|k| g1[k] * img(y * w + x + k)).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..SSIM_WIN).map(|k| g1[k] * rows[(y + k) * ow + x]).sum();
            }
        }
        out
    };
    let mu_a = filt(&|i| ya[i]);
    let mu_b = filt(&|i| yb[i]);
    let aa = filt(&|i| ya[i] * ya[i]);
    let bb = filt(&|i| yb[i] * yb[i]);
    let ab = filt(&|i| ya[i] * yb[i]);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Mean Sobel magnitude of the luma, optionally restricted to `mask` (row-major, `H·W`).
pub fn hf_energy(img: &ImagePlane, mask: Option<&[bool]>) -> Result<f64> {
    let g = sobel_plane(&luma(img), img.height(), img.width());
    match mask {
        None => Ok(g.mean()),
        Some(m) => {
            if m.len() != g.values.len() {
                return Err(Error::Shape(format!(
                    "mask has {} entries for a {}x{} image",
                    m.len(),
                    img.height(),
                    img.width()
                )));
            }
            let (sum, count) = g
                .values
                .iter()
                .zip(m)
                .filter(|(_, &on)| on)
                .fold((0.0, 0usize), |(s, c), (&v, _)| (s + v, c + 1));
            if count == 0 {
                return Err(Error::Domain("hf_energy over an empty mask".into()));
            }
            Ok(sum / count as f64)
        }
    }
}

/// Fractional ranks, ties sharing their average rank (1-based).
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Shape(format!("spearman needs two equal series of length >= 2, got {} and {}", x.len(), y.len())));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Domain("spearman of a constant series".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}
