//! Parameter initialisation and graph building blocks shared by all networks.

use osr_autodiff::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use super::lora::{AdapterSets, LoraRegistry};

pub const GROUPS: usize = 8;
const GN_EPS: f64 = 1e-5;

fn insert<T: Scalar>(store: &mut ParamStore<T>, name: String, t: Tensor<T>) {
    store
        .insert(&name, t)
        .unwrap_or_else(|e| panic!("network definition error: {e}"));
}

fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let e: f64 = rng.sample(StandardNormal);
        T::from_f64(e * std)
    })
}

/// Registers `site.w` (`out×in×k×k`) and `site.b`. `zero` zero-initialises both.
pub fn init_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    site: &str,
    cin: usize,
    cout: usize,
    k: usize,
    zero: bool,
) {
    let std = if zero { 0.0 } else { (1.0 / (cin * k * k) as f64).sqrt() };
    insert(store, format!("{site}.w"), normal(&[cout, cin, k, k], std, rng));
    insert(store, format!("{site}.b"), Tensor::zeros(&[cout]));
}

/// Registers `site.w` (`in×out`) and, when `bias`, `site.b`.
pub fn init_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    site: &str,
    din: usize,
    dout: usize,
    bias: bool,
) {
    insert(store, format!("{site}.w"), normal(&[din, dout], (1.0 / din as f64).sqrt(), rng));
    if bias {
        insert(store, format!("{site}.b"), Tensor::zeros(&[dout]));
    }
}

/// Per-channel affine parameters for group normalisation.
pub fn init_norm<T: Scalar>(store: &mut ParamStore<T>, site: &str, c: usize) {
    insert(store, format!("{site}.g"), Tensor::full(&[c], T::one()));
    insert(store, format!("{site}.b"), Tensor::zeros(&[c]));
}

pub fn init_embedding<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, site: &str, n: usize, d: usize) {
    insert(store, format!("{site}.w"), normal(&[n, d], 1.0, rng));
}

/// Read-only view of the parameters used while building a forward graph.
#[derive(Clone, Copy)]
pub struct Ctx<'a, T> {
    pub store: &'a ParamStore<T>,
    pub lora: &'a LoraRegistry,
    pub active: AdapterSets,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn param(&self, g: &mut Graph<T>, name: &str) -> Var {
        let id = self
            .store
            .id(name)
            .unwrap_or_else(|| panic!("network definition error: no parameter `{name}`"));
        g.param(self.store, id)
    }

    /// `site.w` plus the deltas of every active adapter registered at `site`.
    pub fn weight(&self, g: &mut Graph<T>, site: &str) -> Var {
        let w = self.param(g, &format!("{site}.w"));
        let mut out = w;
        for ad in self.lora.at_site(site) {
            if !self.active.contains(ad.set) {
                continue;
            }
            let a = self.param(g, &ad.param_a());
            let b = self.param(g, &ad.param_b());
            let shape = g.shape(w).to_vec();
            let delta = if shape.len() == 4 {
                // conv: B (out×r) · A (r×in·k·k)
                let d = g.matmul(b, a);
                g.reshape(d, &shape)
            } else {
                // linear: A (in×r) · B (r×out)
                g.matmul(a, b)
            };
            let delta = g.scale(delta, ad.scale);
            out = g.add(out, delta);
        }
        out
    }

    pub fn conv(&self, g: &mut Graph<T>, x: Var, site: &str, stride: usize, pad: usize) -> Var {
        let w = self.weight(g, site);
        let b = self.param(g, &format!("{site}.b"));
        let y = g.conv2d(x, w, stride, pad);
        let c = g.shape(b)[0];
        let b = g.reshape(b, &[1, c, 1, 1]);
        g.add(y, b)
    }

    /// `x · W (+ b)` over the last axis.
    pub fn linear(&self, g: &mut Graph<T>, x: Var, site: &str) -> Var {
        let w = self.weight(g, site);
        let y = g.matmul(x, w);
        match self.store.id(&format!("{site}.b")) {
            Some(id) => {
                let b = g.param(self.store, id);
                g.add(y, b)
            }
            None => y,
        }
    }

    pub fn norm(&self, g: &mut Graph<T>, x: Var, site: &str) -> Var {
        let y = g.group_norm(x, GROUPS, GN_EPS);
        let c = g.shape(x)[1];
        let mut shape = vec![1; g.shape(x).len()];
        shape[1] = c;
        let gamma = self.param(g, &format!("{site}.g"));
        let beta = self.param(g, &format!("{site}.b"));
        let gamma = g.reshape(gamma, &shape);
        let beta = g.reshape(beta, &shape);
        let y = g.mul(y, gamma);
        g.add(y, beta)
    }

    /// GroupNorm → SiLU → conv.
    pub fn norm_act_conv(&self, g: &mut Graph<T>, x: Var, site: &str, norm: &str) -> Var {
        let h = self.norm(g, x, norm);
        let h = g.silu(h);
        self.conv(g, h, site, 1, 1)
    }
}

/// Residual block with two 3×3 convolutions and an optional per-sample bias `emb`
/// (`N×C×1×1`) added between them.
pub fn init_resblock<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, site: &str, c: usize, emb_dim: Option<usize>) {
    init_norm(store, &format!("{site}.n1"), c);
    init_conv(store, rng, &format!("{site}.conv1"), c, c, 3, false);
    if let Some(d) = emb_dim {
        init_linear(store, rng, &format!("{site}.emb"), d, c, true);
    }
    init_norm(store, &format!("{site}.n2"), c);
    init_conv(store, rng, &format!("{site}.conv2"), c, c, 3, false);
}

pub fn resblock<T: Scalar>(ctx: &Ctx<T>, g: &mut Graph<T>, x: Var, site: &str, emb: Option<Var>) -> Var {
    let mut h = ctx.norm_act_conv(g, x, &format!("{site}.conv1"), &format!("{site}.n1"));
    if let Some(e) = emb {
        let e = ctx.linear(g, e, &format!("{site}.emb"));
        let shape = g.shape(e).to_vec();
        let e = g.reshape(e, &[shape[0], shape[1], 1, 1]);
        h = g.add(h, e);
    }
    let h = ctx.norm_act_conv(g, h, &format!("{site}.conv2"), &format!("{site}.n2"));
    g.add(x, h)
}

// ---------------------------------------------------------------- index maps

/// Flat gather indices for space-to-depth: output channel `c·r² + dy·r + dx`.
pub fn unshuffle_index(n: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<u32> {
    let (ho, wo) = (h / r, w / r);
    let mut idx = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    for y in 0..ho {
                        for x in 0..wo {
                            idx.push((((b * c + ch) * h + y * r + dy) * w + x * r + dx) as u32);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Flat gather indices for depth-to-space, the inverse of [`unshuffle_index`].
pub fn shuffle_index(n: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<u32> {
    let cout = c / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut idx = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for ch in 0..cout {
            for y in 0..ho {
                for x in 0..wo {
                    let cin = ch * r * r + (y % r) * r + x % r;
                    idx.push((((b * c + cin) * h + y / r) * w + x / r) as u32);
                }
            }
        }
    }
    idx
}

pub fn pixel_unshuffle<T: Scalar>(g: &mut Graph<T>, x: Var, r: usize) -> Var {
    let s = g.shape(x).to_vec();
    assert!(s[2] % r == 0 && s[3] % r == 0, "pixel_unshuffle: {s:?} not divisible by {r}");
    let idx = unshuffle_index(s[0], s[1], s[2], s[3], r);
    g.gather(x, &[s[0], s[1] * r * r, s[2] / r, s[3] / r], idx)
}

pub fn pixel_shuffle<T: Scalar>(g: &mut Graph<T>, x: Var, r: usize) -> Var {
    let s = g.shape(x).to_vec();
    assert!(s[1] % (r * r) == 0, "pixel_shuffle: {} channels not divisible by {}", s[1], r * r);
    let idx = shuffle_index(s[0], s[1], s[2], s[3], r);
    g.gather(x, &[s[0], s[1] / (r * r), s[2] * r, s[3] * r], idx)
}

pub fn upsample_nearest<T: Scalar>(g: &mut Graph<T>, x: Var, f: usize) -> Var {
    let s = g.shape(x).to_vec();
    let (h, w) = (s[2], s[3]);
    let mut idx = Vec::with_capacity(s[0] * s[1] * h * w * f * f);
    for plane in 0..s[0] * s[1] {
        for y in 0..h * f {
            for x in 0..w * f {
                idx.push((plane * h * w + (y / f) * w + x / f) as u32);
            }
        }
    }
    g.gather(x, &[s[0], s[1], h * f, w * f], idx)
}

/// `(dh·dw) × (sh·sw)` matrix of bilinear weights (half-pixel centres, clamped edges).
pub fn bilinear_matrix(sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let taps = |d: usize, dn: usize, sn: usize| -> [(usize, f64); 2] {
        let src = ((d as f64 + 0.5) * sn as f64 / dn as f64 - 0.5).clamp(0.0, sn as f64 - 1.0);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(sn - 1);
        let t = src - i0 as f64;
        [(i0, 1.0 - t), (i1, t)]
    };
    let mut m = vec![0.0; dh * dw * sh * sw];
    for y in 0..dh {
        for x in 0..dw {
            let row = (y * dw + x) * sh * sw;
            for (iy, wy) in taps(y, dh, sh) {
                for (ix, wx) in taps(x, dw, sw) {
                    m[row + iy * sw + ix] += wy * wx;
                }
            }
        }
    }
    m
}

/// Sinusoidal timestep features, `N×dim`.
pub fn timestep_features<T: Scalar>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[ts.len(), dim], |i| {
        let (n, k) = (i / dim, i % dim);
        let freq = (-(10000f64.ln()) * (k % half) as f64 / half as f64).exp();
        let arg = ts[n] as f64 * freq;
        T::from_f64(if k < half { arg.sin() } else { arg.cos() })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_inverts_unshuffle() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 8, 4], |i| i as f32));
        let u = pixel_unshuffle(&mut g, x, 2);
        assert_eq!(g.shape(u), &[2, 12, 4, 2]);
        let back = pixel_shuffle(&mut g, u, 2);
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn bilinear_rows_sum_to_one() {
        let m = bilinear_matrix(4, 4, 16, 16);
        for row in m.chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let id = bilinear_matrix(3, 5, 3, 5);
        for (r, row) in id.chunks(15).enumerate() {
            assert_eq!(row[r], 1.0);
        }
    }
}
