//! Trainable components: VAE, text-conditioned U-Net, LQ feature modulation, LoRA adapters,
//! patch discriminator, and the checkpoint container.

pub mod checkpoint;
pub mod disc;
pub mod layers;
pub mod lora;
pub mod unet;
pub mod vae;

use osr_autodiff::{Graph, ParamStore, Scalar, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::adaptive_noise::RampParams;
use crate::error::{Error, Result};
use crate::image::{ColorSpace, ImagePlane};
use crate::schedule::NoiseSchedule;
use crate::vocab::VOCAB_SIZE;
use layers::{unshuffle_index, Ctx};
use lora::{AdapterSet, AdapterSets, LoraConfig, LoraRegistry};

pub use unet::UNetOut;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VaeConfig {
    pub downscale: usize,
    pub latent_channels: usize,
    pub base_width: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            downscale: 4,
            latent_channels: 4,
            base_width: 32,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downscale < 2 || !self.downscale.is_power_of_two() {
            return Err(Error::Config(format!("VAE downscale must be a power of two >= 2, got {}", self.downscale)));
        }
        if self.base_width % layers::GROUPS != 0 || self.latent_channels == 0 {
            return Err(Error::Config(format!("VAE width must be a multiple of {}", layers::GROUPS)));
        }
        Ok(())
    }

    /// Number of stride-2 stages after the initial 2× space-to-depth.
    pub(crate) fn levels(&self) -> usize {
        self.downscale.trailing_zeros() as usize - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UNetConfig {
    pub base_width: usize,
    pub depth: usize,
    pub attn_heads: usize,
    pub text_dim: usize,
    pub vocab_size: usize,
    pub time_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_width: 64,
            depth: 2,
            attn_heads: 4,
            text_dim: 64,
            vocab_size: VOCAB_SIZE,
            time_dim: 128,
        }
    }
}

impl UNetConfig {
    pub fn width(&self, level: usize) -> usize {
        if level == 0 {
            self.base_width
        } else {
            2 * self.base_width
        }
    }

    pub fn validate(&self) -> Result<()> {
        for level in 0..=self.depth {
            let w = self.width(level);
            if w % self.attn_heads != 0 || w % layers::GROUPS != 0 {
                return Err(Error::Config(format!(
                    "U-Net width {w} must be divisible by {} heads and {} groups",
                    self.attn_heads,
                    layers::GROUPS
                )));
            }
        }
        if self.vocab_size == 0 || self.text_dim == 0 || self.time_dim < 2 {
            return Err(Error::Config("U-Net vocab, text and time dims must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vae: VaeConfig,
    pub unet: UNetConfig,
    pub lora: LoraConfig,
    pub lqfm_hidden: usize,
    /// Patch size of the gradient averaging used for adaptive noise.
    pub patch: usize,
    pub ramp: RampParams,
    /// Gradient-weighted latent noise; standard Gaussian noise when off.
    pub use_rgpa: bool,
    pub use_lqfm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vae: VaeConfig::default(),
            unet: UNetConfig::default(),
            lora: LoraConfig::default(),
            lqfm_hidden: 64,
            patch: 16,
            ramp: RampParams::default(),
            use_rgpa: true,
            use_lqfm: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vae.validate()?;
        self.unet.validate()?;
        self.lora.validate()?;
        self.ramp.validate()?;
        if self.lqfm_hidden == 0 || self.patch == 0 {
            return Err(Error::Config("lqfm_hidden and patch must be positive".into()));
        }
        Ok(())
    }
}

/// Pixel-unshuffle of an image: each `r×r` block becomes `r²` channels, ordered
/// `c·r² + dy·r + dx`. Returns `(channels, H/r, W/r, data)`.
pub fn pixel_unshuffle(x: &ImagePlane, r: usize) -> Result<(usize, usize, usize, Vec<f32>)> {
    if r == 0 || x.height() % r != 0 || x.width() % r != 0 {
        return Err(Error::Shape(format!("{}x{} not divisible by {r}", x.height(), x.width())));
    }
    let idx = unshuffle_index(1, x.channels(), x.height(), x.width(), r);
    let data = idx.iter().map(|&i| x.data()[i as usize]).collect();
    Ok((x.channels() * r * r, x.height() / r, x.width() / r, data))
}

/// Inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(c: usize, h: usize, w: usize, data: &[f32], r: usize, space: ColorSpace) -> Result<ImagePlane> {
    if r == 0 || c % (r * r) != 0 || c / (r * r) != space.channels() || data.len() != c * h * w {
        return Err(Error::Shape(format!("cannot shuffle {c}x{h}x{w} by {r} into {space:?}")));
    }
    let idx = layers::shuffle_index(1, c, h, w, r);
    ImagePlane::new(h * r, w * r, space, idx.iter().map(|&i| data[i as usize]).collect())
}

/// Modulation input: the (upsampled) LQ image batch and per-sample `λ_t`.
pub struct LqfmInput<'a> {
    pub x_l: Var,
    pub lambdas: &'a [f64],
}

/// Cloning gives the parameter store a fresh identity; see [`ParamStore`].
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub lora: LoraRegistry,
    /// Multiplier mapping encoder means to unit-scale latents.
    pub latent_scale: f64,
    pub schedule: NoiseSchedule,
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            store: self.store.clone(),
            lora: self.lora.clone(),
            latent_scale: self.latent_scale,
            schedule: self.schedule.clone(),
        }
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        vae::init(&mut store, &mut rng, &config.vae);
        unet::init(&mut store, &mut rng, &config.unet, config.vae.latent_channels);
        let r = config.vae.downscale;
        layers::init_conv(&mut store, &mut rng, "lqfm.l1", 3 * r * r, config.lqfm_hidden, 1, false);
        layers::init_conv(&mut store, &mut rng, "lqfm.l2", config.lqfm_hidden, 2 * config.unet.base_width, 1, true);
        Ok(Self {
            config,
            store,
            lora: LoraRegistry::default(),
            latent_scale: 1.0,
            schedule,
        })
    }

    pub fn ctx(&self, active: AdapterSets) -> Ctx<'_, T> {
        Ctx {
            store: &self.store,
            lora: &self.lora,
            active,
        }
    }

    pub fn has_adapters(&self, set: AdapterSet) -> bool {
        self.lora.adapters().iter().any(|a| a.set == set)
    }

    /// Stage-1 adapters: every encoder convolution (encoder rank) and every U-Net
    /// convolution/linear layer (U-Net rank).
    pub fn inject_stage1(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sites: Vec<(String, usize)> = self
            .store
            .iter()
            .filter_map(|(_, name, _)| name.strip_suffix(".w").map(str::to_string))
            .filter_map(|site| {
                if site.starts_with("vae.enc.") {
                    Some((site, self.config.lora.rank_encoder))
                } else if site.starts_with("unet.") && site != "unet.text" {
                    Some((site, self.config.lora.rank_unet))
                } else {
                    None
                }
            })
            .collect();
        for (site, rank) in sites {
            self.lora
                .inject(&mut self.store, &mut rng, &site, AdapterSet::Stage1, rank, self.config.lora.scaling)?;
        }
        Ok(())
    }

    /// Stage-2 adapters on the cross-attention projections only.
    pub fn inject_stage2(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sites: Vec<String> = self
            .store
            .iter()
            .filter_map(|(_, name, _)| name.strip_suffix(".w").map(str::to_string))
            .filter(|site| is_cross_attention_site(site))
            .collect();
        for site in sites {
            self.lora.inject(
                &mut self.store,
                &mut rng,
                &site,
                AdapterSet::Stage2,
                self.config.lora.rank_crossattn_stage2,
                self.config.lora.scaling,
            )?;
        }
        Ok(())
    }

    /// Marks exactly the parameters whose names satisfy `pred` as trainable.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        self.store.set_trainable_where(pred);
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.store
            .ids()
            .filter(|&id| self.store.is_trainable(id))
            .map(|id| self.store.name(id).to_string())
            .collect()
    }

    /// SHA-256 over the names and f32 little-endian bytes of every parameter not matching
    /// `exclude`, in name order.
    pub fn param_hash(&self, exclude: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        let mut params: Vec<_> = self.store.iter().filter(|(_, name, _)| !exclude(name)).collect();
        params.sort_by(|a, b| a.1.cmp(b.1));
        for (_, name, t) in params {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update((v.to_f64_lossy() as f32).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn encode_moments(&self, g: &mut Graph<T>, active: AdapterSets, x: Var) -> (Var, Var) {
        vae::encode(&self.ctx(active), g, &self.config.vae, x)
    }

    /// Posterior mean times the latent scale.
    pub fn encode(&self, g: &mut Graph<T>, active: AdapterSets, x: Var) -> Var {
        let (mean, _) = self.encode_moments(g, active, x);
        g.scale(mean, self.latent_scale)
    }

    pub fn decode(&self, g: &mut Graph<T>, z: Var) -> Var {
        let z = g.scale(z, 1.0 / self.latent_scale);
        vae::decode(&self.ctx(AdapterSets::NONE), g, &self.config.vae, z)
    }

    /// Frozen early encoder features (no adapters), for the perceptual distance.
    pub fn features(&self, g: &mut Graph<T>, x: Var) -> Var {
        vae::features(&self.ctx(AdapterSets::NONE), g, x)
    }

    /// `(1 + λγ) ⊙ f + λβ` with `(γ, β)` from two 1×1 convolutions of the unshuffled LQ image.
    pub fn lqfm(&self, g: &mut Graph<T>, active: AdapterSets, f: Var, input: &LqfmInput) -> Result<Var> {
        let ctx = self.ctx(active);
        let r = self.config.vae.downscale;
        let fs = g.shape(f).to_vec();
        let xs = g.shape(input.x_l).to_vec();
        if xs.len() != 4 || xs[1] != 3 || xs[0] != fs[0] || xs[2] != fs[2] * r || xs[3] != fs[3] * r {
            return Err(Error::Shape(format!("LQ image {xs:?} does not match features {fs:?} at factor {r}")));
        }
        if input.lambdas.len() != fs[0] {
            return Err(Error::Shape(format!("{} modulation coefficients for batch {}", input.lambdas.len(), fs[0])));
        }
        let u = layers::pixel_unshuffle(g, input.x_l, r);
        let h = ctx.conv(g, u, "lqfm.l1", 1, 0);
        let h = g.silu(h);
        let gb = ctx.conv(g, h, "lqfm.l2", 1, 0);
        let c = fs[1];
        let gamma = g.narrow(gb, 1, 0, c);
        let beta = g.narrow(gb, 1, c, c);
        let lam = g.constant(osr_autodiff::Tensor::from_fn(&[fs[0], 1, 1, 1], |i| {
            T::from_f64(input.lambdas[i])
        }));
        let gf = g.mul(gamma, f);
        let mod_ = g.add(gf, beta);
        let mod_ = g.mul(mod_, lam);
        Ok(g.add(f, mod_))
    }

    pub fn unet(
        &self,
        g: &mut Graph<T>,
        active: AdapterSets,
        z_t: Var,
        ts: &[usize],
        tokens: &[Vec<usize>],
        lqfm: Option<&LqfmInput>,
    ) -> Result<UNetOut> {
        unet::forward(self, g, active, z_t, ts, tokens, lqfm)
    }

    pub fn validate_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.config.unet.vocab_size) {
            Some(t) => Err(Error::Vocabulary(format!("token id {t}"))),
            None => Ok(()),
        }
    }
}

pub fn is_cross_attention_site(site: &str) -> bool {
    site.starts_with("unet.")
        && [".attn.q", ".attn.k", ".attn.v", ".attn.o"]
            .iter()
            .any(|s| site.ends_with(s))
}

pub fn is_stage2_adapter(name: &str) -> bool {
    name.starts_with(AdapterSet::Stage2.prefix())
}
