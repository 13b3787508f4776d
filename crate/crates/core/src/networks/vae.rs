use osr_autodiff::{Graph, ParamStore, Scalar, Var};
use rand::Rng;

use super::layers::{init_conv, init_norm, init_resblock, pixel_shuffle, pixel_unshuffle, resblock, Ctx};
use super::VaeConfig;

fn width(cfg: &VaeConfig, level: usize) -> usize {
    cfg.base_width << level
}

pub fn init<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, cfg: &VaeConfig) {
    let levels = cfg.levels();
    init_conv(store, rng, "vae.enc.in", 12, width(cfg, 0), 3, false);
    init_resblock(store, rng, "vae.enc.res0", width(cfg, 0), None);
    for l in 1..=levels {
        init_conv(store, rng, &format!("vae.enc.down{l}"), width(cfg, l - 1), width(cfg, l), 3, false);
        init_resblock(store, rng, &format!("vae.enc.res{l}"), width(cfg, l), None);
    }
    init_norm(store, "vae.enc.nout", width(cfg, levels));
    init_conv(store, rng, "vae.enc.out", width(cfg, levels), 2 * cfg.latent_channels, 1, false);

    init_conv(store, rng, "vae.dec.in", cfg.latent_channels, width(cfg, levels), 3, false);
    init_resblock(store, rng, &format!("vae.dec.res{levels}"), width(cfg, levels), None);
    for l in (1..=levels).rev() {
        init_conv(store, rng, &format!("vae.dec.up{l}"), width(cfg, l), 4 * width(cfg, l - 1), 3, false);
        init_resblock(store, rng, &format!("vae.dec.res{}", l - 1), width(cfg, l - 1), None);
    }
    init_norm(store, "vae.dec.nout", width(cfg, 0));
    init_conv(store, rng, "vae.dec.out", width(cfg, 0), 12, 3, false);
}

/// Returns the posterior `(mean, logvar)`, each `N×latent×H/d×W/d`.
pub fn encode<T: Scalar>(ctx: &Ctx<T>, g: &mut Graph<T>, cfg: &VaeConfig, x: Var) -> (Var, Var) {
    let mut h = features(ctx, g, x);
    for l in 1..=cfg.levels() {
        h = ctx.conv(g, h, &format!("vae.enc.down{l}"), 2, 1);
        h = resblock(ctx, g, h, &format!("vae.enc.res{l}"), None);
    }
    let h = ctx.norm(g, h, "vae.enc.nout");
    let h = g.silu(h);
    let out = ctx.conv(g, h, "vae.enc.out", 1, 0);
    let c = cfg.latent_channels;
    let mean = g.narrow(out, 1, 0, c);
    let logvar = g.narrow(out, 1, c, c);
    (mean, logvar)
}

/// First encoder stage (2× space-to-depth, convolution, residual block).
pub fn features<T: Scalar>(ctx: &Ctx<T>, g: &mut Graph<T>, x: Var) -> Var {
    let h = pixel_unshuffle(g, x, 2);
    let h = ctx.conv(g, h, "vae.enc.in", 1, 1);
    resblock(ctx, g, h, "vae.enc.res0", None)
}

pub fn decode<T: Scalar>(ctx: &Ctx<T>, g: &mut Graph<T>, cfg: &VaeConfig, z: Var) -> Var {
    let levels = cfg.levels();
    let mut h = ctx.conv(g, z, "vae.dec.in", 1, 1);
    h = resblock(ctx, g, h, &format!("vae.dec.res{levels}"), None);
    for l in (1..=levels).rev() {
        h = ctx.conv(g, h, &format!("vae.dec.up{l}"), 1, 1);
        h = pixel_shuffle(g, h, 2);
        h = resblock(ctx, g, h, &format!("vae.dec.res{}", l - 1), None);
    }
    let h = ctx.norm_act_conv(g, h, "vae.dec.out", "vae.dec.nout");
    pixel_shuffle(g, h, 2)
}
