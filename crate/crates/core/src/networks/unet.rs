use osr_autodiff::{Graph, ParamStore, Scalar, Var};
use rand::Rng;

use super::layers::{
    init_conv, init_embedding, init_linear, init_norm, init_resblock, resblock, timestep_features,
    upsample_nearest, Ctx,
};
use super::lora::AdapterSets;
use super::{LqfmInput, Model, UNetConfig};

pub struct UNetOut {
    pub eps: Var,
    /// Per cross-attention layer, `N × (h·w) × tokens`, rows summing to one.
    pub attn: Vec<Var>,
    /// Spatial size `(h, w)` of each attention layer.
    pub attn_sizes: Vec<(usize, usize)>,
    /// The latent fed to the stem convolution.
    pub stem_input: Var,
    /// Stem output `f^m` before modulation.
    pub stem: Var,
}

pub fn init<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, cfg: &UNetConfig, latent: usize) {
    let td = cfg.time_dim;
    init_linear(store, rng, "unet.time.l1", td / 2, td, true);
    init_linear(store, rng, "unet.time.l2", td, td, true);
    init_embedding(store, rng, "unet.text", cfg.vocab_size, cfg.text_dim);
    init_conv(store, rng, "unet.stem", latent, cfg.width(0), 3, false);
    for l in 0..=cfg.depth {
        let c = cfg.width(l);
        init_resblock(store, rng, &format!("unet.down{l}.res"), c, Some(td));
        init_attn(store, rng, &format!("unet.down{l}.attn"), c, cfg.text_dim);
        if l < cfg.depth {
            init_conv(store, rng, &format!("unet.down{l}.ds"), c, cfg.width(l + 1), 3, false);
        }
    }
    for l in (0..cfg.depth).rev() {
        let c = cfg.width(l);
        init_conv(store, rng, &format!("unet.up{l}.us"), cfg.width(l + 1), c, 3, false);
        init_resblock(store, rng, &format!("unet.up{l}.res"), c, Some(td));
        init_attn(store, rng, &format!("unet.up{l}.attn"), c, cfg.text_dim);
    }
    init_norm(store, "unet.out.n", cfg.width(0));
    init_conv(store, rng, "unet.out", cfg.width(0), latent, 3, false);
}

fn init_attn<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, site: &str, c: usize, text_dim: usize) {
    init_norm(store, &format!("{site}.n"), c);
    init_linear(store, rng, &format!("{site}.q"), c, c, false);
    init_linear(store, rng, &format!("{site}.k"), text_dim, c, false);
    init_linear(store, rng, &format!("{site}.v"), text_dim, c, false);
    init_linear(store, rng, &format!("{site}.o"), c, c, true);
}

/// Embeds token ids, `N×L×D`.
pub fn embed_tokens<T: Scalar>(ctx: &Ctx<T>, g: &mut Graph<T>, tokens: &[Vec<usize>]) -> Var {
    let table = ctx.param(g, "unet.text.w");
    let (v, d) = (g.shape(table)[0], g.shape(table)[1]);
    let l = tokens[0].len();
    let mut idx = Vec::with_capacity(tokens.len() * l * d);
    for row in tokens {
        assert_eq!(row.len(), l, "ragged token batch");
        for &t in row {
            assert!(t < v, "token {t} outside vocabulary of {v}");
            idx.extend((0..d).map(|k| (t * d + k) as u32));
        }
    }
    g.gather(table, &[tokens.len(), l, d], idx)
}

/// Cross-attention from spatial queries to text keys; returns `(x + out, head-averaged map)`.
pub fn cross_attention<T: Scalar>(
    ctx: &Ctx<T>,
    g: &mut Graph<T>,
    x: Var,
    text: Var,
    site: &str,
    heads: usize,
) -> (Var, Var) {
    let s = g.shape(x).to_vec();
    let (n, c, p) = (s[0], s[1], s[2] * s[3]);
    let l = g.shape(text)[1];
    let dh = c / heads;
    let h = ctx.norm(g, x, &format!("{site}.n"));
    let h = g.reshape(h, &[n, c, p]);
    let h = g.permute(h, &[0, 2, 1]);
    let q = ctx.linear(g, h, &format!("{site}.q"));
    let k = ctx.linear(g, text, &format!("{site}.k"));
    let v = ctx.linear(g, text, &format!("{site}.v"));
    let q = g.reshape(q, &[n, p, heads, dh]);
    let q = g.permute(q, &[0, 2, 1, 3]);
    let k = g.reshape(k, &[n, l, heads, dh]);
    let k = g.permute(k, &[0, 2, 3, 1]);
    let v = g.reshape(v, &[n, l, heads, dh]);
    let v = g.permute(v, &[0, 2, 1, 3]);
    let scores = g.matmul(q, k);
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let probs = g.softmax(scores);
    let o = g.matmul(probs, v);
    let o = g.permute(o, &[0, 2, 1, 3]);
    let o = g.reshape(o, &[n, p, c]);
    let o = ctx.linear(g, o, &format!("{site}.o"));
    let o = g.permute(o, &[0, 2, 1]);
    let o = g.reshape(o, &s);
    let out = g.add(x, o);
    let map = g.mean_axes(probs, &[1]);
    let map = g.reshape(map, &[n, p, l]);
    (out, map)
}

pub fn forward<T: Scalar>(
    model: &Model<T>,
    g: &mut Graph<T>,
    active: AdapterSets,
    z_t: Var,
    ts: &[usize],
    tokens: &[Vec<usize>],
    lqfm: Option<&LqfmInput>,
) -> crate::error::Result<UNetOut> {
    let cfg = &model.config.unet;
    let ctx = model.ctx(active);
    let n = g.shape(z_t)[0];
    assert_eq!(ts.len(), n, "one timestep per sample");
    assert_eq!(tokens.len(), n, "one prompt per sample");

    let tf = g.constant(timestep_features(ts, cfg.time_dim / 2));
    let temb = ctx.linear(g, tf, "unet.time.l1");
    let temb = g.silu(temb);
    let temb = ctx.linear(g, temb, "unet.time.l2");
    let temb = g.silu(temb);
    let text = embed_tokens(&ctx, g, tokens);

    let stem = ctx.conv(g, z_t, "unet.stem", 1, 1);
    let mut h = match lqfm {
        Some(input) => model.lqfm(g, active, stem, input)?,
        None => stem,
    };

    let mut skips = Vec::new();
    let mut attn = Vec::new();
    let mut attn_sizes = Vec::new();
    let mut push_attn = |g: &Graph<T>, h: Var, map: Var, attn: &mut Vec<Var>| {
        let s = g.shape(h);
        attn_sizes.push((s[2], s[3]));
        attn.push(map);
    };
    for l in 0..=cfg.depth {
        h = resblock(&ctx, g, h, &format!("unet.down{l}.res"), Some(temb));
        let (o, map) = cross_attention(&ctx, g, h, text, &format!("unet.down{l}.attn"), cfg.attn_heads);
        h = o;
        push_attn(g, h, map, &mut attn);
        if l < cfg.depth {
            skips.push(h);
            h = ctx.conv(g, h, &format!("unet.down{l}.ds"), 2, 1);
        }
    }
    for l in (0..cfg.depth).rev() {
        h = upsample_nearest(g, h, 2);
        h = ctx.conv(g, h, &format!("unet.up{l}.us"), 1, 1);
        h = g.add(h, skips[l]);
        h = resblock(&ctx, g, h, &format!("unet.up{l}.res"), Some(temb));
        let (o, map) = cross_attention(&ctx, g, h, text, &format!("unet.up{l}.attn"), cfg.attn_heads);
        h = o;
        push_attn(g, h, map, &mut attn);
    }
    let eps = ctx.norm_act_conv(g, h, "unet.out", "unet.out.n");
    Ok(UNetOut {
        eps,
        attn,
        attn_sizes,
        stem_input: z_t,
        stem,
    })
}
