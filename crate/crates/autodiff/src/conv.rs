//! 2D convolution via im2col + gemm, NCHW layout.

use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds one sample (`C×H×W`) into rows of a `(C·kh·kw) × ld` column matrix, writing the
/// sample's `Ho·Wo` positions starting at column `off`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T], ld: usize, off: usize) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let p = ho * wo;
    let (h, w) = (g.height as isize, g.width as isize);
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let dst = &mut cols[row * ld + off..row * ld + off + p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.stride == 1 {
                        let shift = kx as isize - g.pad as isize;
                        let lo = (-shift).clamp(0, wo as isize) as usize;
                        let hi = (w - shift).clamp(lo as isize, wo as isize) as usize;
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        let s0 = (lo as isize + shift) as usize;
                        line[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                        continue;
                    }
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= w {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Folds columns `off..off + Ho·Wo` of a column matrix back onto one sample, accumulating
/// overlapping contributions.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T], ld: usize, off: usize) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let p = ho * wo;
    let (h, w) = (g.height as isize, g.width as isize);
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let src = &cols[row * ld + off..row * ld + off + p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let line = &src[oy * wo..(oy + 1) * wo];
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Samples per im2col batch, keeping the column buffer near `COL_BUDGET` elements.
const COL_BUDGET: usize = 1 << 23;

fn chunk_size(g: &ConvGeometry) -> usize {
    (COL_BUDGET / (g.patch_len() * g.positions()).max(1)).clamp(1, g.batch.max(1))
}

pub fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], g: &ConvGeometry) -> Vec<T> {
    let k = g.patch_len();
    let p = g.positions();
    let sample_in = g.in_channels * g.height * g.width;
    let sample_out = g.out_channels * p;
    let mut out = vec![T::zero(); g.batch * sample_out];
    let chunk = chunk_size(g);
    let mut cols = vec![T::zero(); k * p * chunk];
    let mut res = vec![T::zero(); g.out_channels * p * chunk];
    for n0 in (0..g.batch).step_by(chunk) {
        let nb = chunk.min(g.batch - n0);
        let ld = nb * p;
        for s in 0..nb {
            let n = n0 + s;
            im2col(&x[n * sample_in..(n + 1) * sample_in], g, &mut cols, ld, s * p);
        }
        T::gemm(
            g.out_channels,
            k,
            ld,
            T::one(),
            weight,
            k as isize,
            1,
            &cols[..k * ld],
            ld as isize,
            1,
            T::zero(),
            &mut res[..g.out_channels * ld],
            ld as isize,
            1,
        );
        for s in 0..nb {
            let dst = &mut out[(n0 + s) * sample_out..(n0 + s + 1) * sample_out];
            for co in 0..g.out_channels {
                dst[co * p..(co + 1) * p].copy_from_slice(&res[co * ld + s * p..co * ld + (s + 1) * p]);
            }
        }
    }
    out
}

/// Returns `(dx, dw)`; either is skipped (empty) when not requested.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeometry,
    want_dx: bool,
    want_dw: bool,
) -> (Vec<T>, Vec<T>) {
    let k = g.patch_len();
    let p = g.positions();
    let sample_in = g.in_channels * g.height * g.width;
    let sample_out = g.out_channels * p;
    let mut dx = if want_dx {
        vec![T::zero(); g.batch * sample_in]
    } else {
        Vec::new()
    };
    let mut dw = if want_dw {
        vec![T::zero(); g.out_channels * k]
    } else {
        Vec::new()
    };
    let chunk = chunk_size(g);
    let mut cols = vec![T::zero(); k * p * chunk];
    let mut dbuf = vec![T::zero(); g.out_channels * p * chunk];
    for n0 in (0..g.batch).step_by(chunk) {
        let nb = chunk.min(g.batch - n0);
        let ld = nb * p;
        for s in 0..nb {
            let src = &dout[(n0 + s) * sample_out..(n0 + s + 1) * sample_out];
            for co in 0..g.out_channels {
                dbuf[co * ld + s * p..co * ld + (s + 1) * p].copy_from_slice(&src[co * p..(co + 1) * p]);
            }
        }
        if want_dw {
            for s in 0..nb {
                let n = n0 + s;
                im2col(&x[n * sample_in..(n + 1) * sample_in], g, &mut cols, ld, s * p);
            }
            // dW += dOut · colsᵀ
            T::gemm(
                g.out_channels,
                ld,
                k,
                T::one(),
                &dbuf[..g.out_channels * ld],
                ld as isize,
                1,
                &cols[..k * ld],
                1,
                ld as isize,
                T::one(),
                &mut dw,
                k as isize,
                1,
            );
        }
        if want_dx {
            // dcols = Wᵀ · dOut
            T::gemm(
                k,
                g.out_channels,
                ld,
                T::one(),
                weight,
                1,
                k as isize,
                &dbuf[..g.out_channels * ld],
                ld as isize,
                1,
                T::zero(),
                &mut cols[..k * ld],
                ld as isize,
                1,
            );
            for s in 0..nb {
                let n = n0 + s;
                col2im(&cols, g, &mut dx[n * sample_in..(n + 1) * sample_in], ld, s * p);
            }
        }
    }
    (dx, dw)
}
