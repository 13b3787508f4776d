use osr_core::error::Error;
use osr_core::image::{ColorSpace, ImagePlane};
use osr_core::metrics::{hf_energy, psnr_y, spearman, ssim, PSNR_CAP};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn luma_oracle(img: &ImagePlane) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(if img.channels() == 1 {
                img.get(0, y, x) as f64
            } else {
                0.299 * img.get(0, y, x) as f64 + 0.587 * img.get(1, y, x) as f64 + 0.114 * img.get(2, y, x) as f64
            });
        }
    }
    out
}

fn psnr_oracle(a: &ImagePlane, b: &ImagePlane) -> f64 {
    let (ya, yb) = (luma_oracle(a), luma_oracle(b));
    let mut se = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            let i = y * a.width() + x;
            se += (ya[i] - yb[i]).powi(2);
        }
    }
    let mse = se / (a.height() * a.width()) as f64;
    10.0 * (1.0 / mse).log10()
}

/// Mean SSIM with every 11×11 window evaluated by direct 2D summation.
fn ssim_oracle(a: &ImagePlane, b: &ImagePlane) -> f64 {
    let (h, w) = (a.height(), a.width());
    let (ya, yb) = (luma_oracle(a), luma_oracle(b));
    let mut k = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = (i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2);
            *v = (-d2 / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wt = k[i][j] / total;
                    let p = (y0 + i) * w + x0 + j;
                    ma += wt * ya[p];
                    mb += wt * yb[p];
                    aa += wt * ya[p] * ya[p];
                    bb += wt * yb[p] * yb[p];
                    ab += wt * ya[p] * yb[p];
                }
            }
            let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

fn random_rgb(h: usize, w: usize, rng: &mut impl Rng) -> ImagePlane {
    ImagePlane::from_fn(h, w, ColorSpace::Rgb, |_, _, _| rng.random_range(0.0..1.0))
}

#[test]
fn psnr_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let (a, b) = (random_rgb(32, 32, &mut rng), random_rgb(32, 32, &mut rng));
        assert!((psnr_y(&a, &b).unwrap() - psnr_oracle(&a, &b)).abs() <= 1e-9);
    }
}

#[test]
fn psnr_identical_is_capped() {
    let a = random_rgb(8, 8, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(psnr_y(&a, &a).unwrap(), PSNR_CAP);
}

#[test]
fn ssim_matches_windowed_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let a = random_rgb(32, 32, &mut rng);
        let b = ImagePlane::from_fn(32, 32, ColorSpace::Rgb, |c, y, x| {
            (a.get(c, y, x) + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0)
        });
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() <= 1e-6);
    }
}

#[test]
fn ssim_constant_offset() {
    let a = ImagePlane::filled(16, 16, ColorSpace::Luma, 0.25);
    let b = ImagePlane::filled(16, 16, ColorSpace::Luma, 0.75);
    let s = ssim(&a, &b).unwrap();
    assert!((s - ssim_oracle(&a, &b)).abs() <= 1e-6);
    // zero variance: only the luminance term remains
    let (c1, ma, mb) = (1e-4, 0.25f64, 0.75f64);
    let expected = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
    assert!((s - expected).abs() <= 1e-6);
}

#[test]
fn hf_energy_of_checkerboard_matches_sobel_oracle() {
    let board = ImagePlane::from_fn(16, 16, ColorSpace::Luma, |_, y, x| ((y / 2 + x / 2) % 2) as f32);
    let p: Vec<f64> = board.data().iter().map(|&v| v as f64).collect();
    let (h, w) = (16usize, 16usize);
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let at = |dy: i64, dx: i64| {
                let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                p[yy * w + xx]
            };
            let gx = at(-1, 1) + 2.0 * at(0, 1) + at(1, 1) - at(-1, -1) - 2.0 * at(0, -1) - at(1, -1);
            let gy = at(1, -1) + 2.0 * at(1, 0) + at(1, 1) - at(-1, -1) - 2.0 * at(-1, 0) - at(-1, 1);
            total += (gx * gx + gy * gy).sqrt();
        }
    }
    assert!((hf_energy(&board, None).unwrap() - total / (h * w) as f64).abs() <= 1e-6);
    let mask: Vec<bool> = (0..h * w).map(|i| i % w < 8).collect();
    assert!(hf_energy(&board, Some(&mask)).unwrap() > 0.0);
    assert!(matches!(hf_energy(&board, Some(&mask[..10])), Err(Error::Shape(_))));
}

#[test]
fn spearman_with_ties() {
    let r = spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 3.0, 9.0]).unwrap();
    assert!((r - 1.0).abs() < 1e-12);
    assert!(spearman(&[1.0], &[2.0]).is_err());
    assert!(matches!(spearman(&[1.0, 1.0], &[2.0, 3.0]), Err(Error::Domain(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn psnr_positive_and_ssim_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_rgb(16, 16, &mut rng), random_rgb(16, 16, &mut rng));
        prop_assert!(psnr_y(&a, &b).unwrap() > 0.0);
        prop_assert!(ssim(&a, &b).unwrap() <= 1.0);
        prop_assert!(ssim(&a, &a).unwrap() <= 1.0 + 1e-12);
    }
}
