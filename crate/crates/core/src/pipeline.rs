//! One-step restoration shared by training and inference: encode the upsampled LQ image,
//! perturb the latent once, predict the noise, recover and decode.

use osr_autodiff::{Graph, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adaptive_noise::{standard_noise, synthesize_noise, weight_map, WeightMap};
use crate::dataset::{splitmix64, AnnotatedSample};
use crate::error::{Error, Result};
use crate::image::{ColorSpace, ImagePlane};
use crate::metrics::{hf_energy, psnr_y, ssim};
use crate::networks::lora::{AdapterSet, AdapterSets};
use crate::networks::{LqfmInput, Model, ModelConfig, UNetOut};
use crate::tmg::{sample_tokens, NounMaskSet, DEFAULT_MASK_THRESHOLD};

/// Largest batch pushed through one inference graph.
pub const EVAL_CHUNK: usize = 16;

/// A dataset sample with everything the pipeline derives from it.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub seed: u64,
    pub hq: ImagePlane,
    /// Bicubic upsample of the LQ image to HQ size.
    pub x_l: ImagePlane,
    pub tokens: Vec<usize>,
    pub masks: NounMaskSet,
    pub weights: WeightMap,
    pub texture: Vec<bool>,
}

pub fn prepare_one<T: Scalar>(s: &AnnotatedSample, model: &Model<T>) -> Result<PreparedSample> {
    prepare_with_config(s, &model.config)
}

/// Like [`prepare_one`] but needs only the model configuration.
pub fn prepare_with_config(s: &AnnotatedSample, cfg: &ModelConfig) -> Result<PreparedSample> {
    let r = cfg.vae.downscale;
    let x_l = s.lq.upsample_bicubic(r);
    x_l.same_shape(&s.hq)?;
    Ok(PreparedSample {
        seed: s.seed,
        hq: s.hq.clone(),
        weights: weight_map(&x_l, cfg.patch, cfg.ramp)?,
        x_l,
        tokens: sample_tokens(s)?,
        masks: NounMaskSet::from_sample(s, r, DEFAULT_MASK_THRESHOLD)?,
        texture: s.texture.clone(),
    })
}

pub fn prepare<T: Scalar>(samples: &[AnnotatedSample], model: &Model<T>) -> Result<Vec<PreparedSample>> {
    samples.iter().map(|s| prepare_one(s, model)).collect()
}

/// Per-sample inference noise stream, independent of batching.
pub fn noise_rng(seed: u64, sample_seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(sample_seed)))
}

/// Latent noise for one sample: gradient-weighted when `rgpa`, standard otherwise.
pub fn latent_noise(
    s: &PreparedSample,
    channels: usize,
    h: usize,
    w: usize,
    rgpa: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f32>> {
    if rgpa {
        synthesize_noise(&s.weights, channels, h, w, rng)
    } else {
        Ok(standard_noise(channels, h, w, rng))
    }
}

pub fn stack_images<T: Scalar>(images: &[&ImagePlane]) -> Result<Tensor<T>> {
    ImagePlane::stack(images)
}

/// `N×1×1×1` constant holding one value per sample.
pub fn per_sample<T: Scalar>(g: &mut Graph<T>, values: &[f64]) -> Var {
    g.constant(Tensor::from_fn(&[values.len(), 1, 1, 1], |i| T::from_f64(values[i])))
}

/// `√ᾱ_t · z + √(1-ᾱ_t) · ε` with per-sample `t`.
pub fn diffuse_graph<T: Scalar>(g: &mut Graph<T>, model: &Model<T>, z: Var, eps: Var, ts: &[usize]) -> Result<Var> {
    let (a, b) = signal_noise(model, ts)?;
    let a = per_sample(g, &a);
    let b = per_sample(g, &b);
    let sz = g.mul(z, a);
    let se = g.mul(eps, b);
    Ok(g.add(sz, se))
}

/// `(z_t − √(1-ᾱ_t) · ε̂) / √ᾱ_t` with per-sample `t`.
pub fn recover_graph<T: Scalar>(g: &mut Graph<T>, model: &Model<T>, z_t: Var, eps: Var, ts: &[usize]) -> Result<Var> {
    let (a, b) = signal_noise(model, ts)?;
    let inv_a: Vec<f64> = a.iter().map(|v| 1.0 / v).collect();
    let inv_a = per_sample(g, &inv_a);
    let b = per_sample(g, &b);
    let se = g.mul(eps, b);
    let d = g.sub(z_t, se);
    Ok(g.mul(d, inv_a))
}

fn signal_noise<T: Scalar>(model: &Model<T>, ts: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut a = Vec::with_capacity(ts.len());
    let mut b = Vec::with_capacity(ts.len());
    for &t in ts {
        let (x, y) = model.schedule.signal_noise(t)?;
        a.push(x);
        b.push(y);
    }
    Ok((a, b))
}

pub fn lambdas<T: Scalar>(model: &Model<T>, ts: &[usize]) -> Result<Vec<f64>> {
    ts.iter().map(|&t| model.schedule.mod_coeff(t)).collect()
}

pub struct Restoration {
    pub z_l: Var,
    pub z_t: Var,
    pub unet: UNetOut,
    pub z_h: Var,
    pub x_hat: Var,
}

/// Builds the restoration graph for a batch. `noise` is `N×C×h×w`; `active` selects the
/// adapters used in the encoder and U-Net.
pub fn restoration_graph<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    active: AdapterSets,
    batch: &[&PreparedSample],
    ts: &[usize],
    noise: Tensor<T>,
) -> Result<Restoration> {
    for s in batch {
        model.validate_tokens(&s.tokens)?;
    }
    for &t in ts {
        if t == 0 {
            return Err(Error::Range {
                t,
                lo: 1,
                hi: model.schedule.steps(),
            });
        }
    }
    let x_l: Vec<&ImagePlane> = batch.iter().map(|s| &s.x_l).collect();
    let x_l = g.constant(stack_images(&x_l)?);
    let z_l = model.encode(g, active, x_l);
    if g.shape(z_l) != noise.shape() {
        return Err(Error::Shape(format!("noise {:?} vs latent {:?}", noise.shape(), g.shape(z_l))));
    }
    let eps = g.constant(noise);
    let z_t = diffuse_graph(g, model, z_l, eps, ts)?;
    let tokens: Vec<Vec<usize>> = batch.iter().map(|s| s.tokens.clone()).collect();
    let lam = lambdas(model, ts)?;
    let lq = LqfmInput { x_l, lambdas: &lam };
    let lqfm = model.config.use_lqfm.then_some(&lq);
    let unet = model.unet(g, active, z_t, ts, &tokens, lqfm)?;
    let z_h = recover_graph(g, model, z_t, unet.eps, ts)?;
    let x_hat = model.decode(g, z_h);
    Ok(Restoration {
        z_l,
        z_t,
        unet,
        z_h,
        x_hat,
    })
}

/// Stacked per-sample noise for a batch, each drawn from its own stream.
pub fn batch_noise<T: Scalar>(model: &Model<T>, batch: &[&PreparedSample], rngs: &mut [ChaCha8Rng]) -> Result<Tensor<T>> {
    let c = model.config.vae.latent_channels;
    let d = model.config.vae.downscale;
    let mut data = Vec::new();
    let mut dims = None;
    for (s, rng) in batch.iter().zip(rngs.iter_mut()) {
        let (h, w) = (s.x_l.height() / d, s.x_l.width() / d);
        dims.get_or_insert((h, w));
        let n = latent_noise(s, c, h, w, model.config.use_rgpa, rng)?;
        data.extend(n.data().iter().map(|&v| T::from_f64(v as f64)));
    }
    let (h, w) = dims.unwrap_or((0, 0));
    Tensor::from_vec(&[batch.len(), c, h, w], data).map_err(|e| Error::Shape(e.to_string()))
}

pub fn active_adapters<T: Scalar>(model: &Model<T>) -> AdapterSets {
    AdapterSets {
        stage1: model.has_adapters(AdapterSet::Stage1),
        stage2: model.has_adapters(AdapterSet::Stage2),
    }
}

/// Restores every sample at timestep `t_s`, with all injected adapters active.
pub fn restore<T: Scalar>(model: &Model<T>, samples: &[PreparedSample], t_s: usize, seed: u64) -> Result<Vec<ImagePlane>> {
    restore_with(model, samples, t_s, seed, active_adapters(model)).map(|(imgs, _)| imgs)
}

/// Like [`restore`], also returning the detached attention maps of every layer, per sample.
pub fn restore_with<T: Scalar>(
    model: &Model<T>,
    samples: &[PreparedSample],
    t_s: usize,
    seed: u64,
    active: AdapterSets,
) -> Result<(Vec<ImagePlane>, Vec<Vec<crate::tmg::AttnLayer>>)> {
    model.schedule.mod_coeff(t_s)?;
    let mut out = Vec::with_capacity(samples.len());
    let mut attn = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let batch: Vec<&PreparedSample> = chunk.iter().collect();
        let mut rngs: Vec<ChaCha8Rng> = batch.iter().map(|s| noise_rng(seed, s.seed)).collect();
        let noise = batch_noise(model, &batch, &mut rngs)?;
        let mut g = Graph::new();
        let ts = vec![t_s; batch.len()];
        let r = restoration_graph(&mut g, model, active, &batch, &ts, noise)?;
        let x = g.value(r.x_hat).map(|v| v.max(T::zero()).min(T::one()));
        out.extend(ImagePlane::unstack(&x, ColorSpace::Rgb)?);
        let mut per_sample: Vec<Vec<crate::tmg::AttnLayer>> = vec![Vec::new(); batch.len()];
        for (&v, &(h, w)) in r.unet.attn.iter().zip(&r.unet.attn_sizes) {
            for (n, layer) in crate::tmg::AttnLayer::from_batch(g.value(v), h, w).into_iter().enumerate() {
                per_sample[n].push(layer);
            }
        }
        attn.extend(per_sample);
    }
    Ok((out, attn))
}

/// Full-reference and sharpness metrics of one restored image against its sample.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SampleMetrics {
    pub psnr_y: f64,
    pub ssim: f64,
    pub hf_energy: f64,
    /// `None` when the sample has no pixels of that class.
    pub hf_textured: Option<f64>,
    pub hf_flat: Option<f64>,
}

pub fn sample_metrics(img: &ImagePlane, s: &PreparedSample) -> Result<SampleMetrics> {
    let flat: Vec<bool> = s.texture.iter().map(|&t| !t).collect();
    let masked = |m: &[bool]| -> Result<Option<f64>> {
        if m.iter().any(|&v| v) {
            hf_energy(img, Some(m)).map(Some)
        } else {
            Ok(None)
        }
    };
    Ok(SampleMetrics {
        psnr_y: psnr_y(img, &s.hq)?,
        ssim: ssim(img, &s.hq)?,
        hf_energy: hf_energy(img, None)?,
        hf_textured: masked(&s.texture)?,
        hf_flat: masked(&flat)?,
    })
}

/// Arithmetic means over samples; region means skip samples lacking the region.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct MeanMetrics {
    pub count: usize,
    pub psnr_y: f64,
    pub ssim: f64,
    pub hf_energy: f64,
    pub hf_textured: f64,
    pub hf_flat: f64,
}

pub fn mean_metrics(rows: &[SampleMetrics]) -> MeanMetrics {
    let mean = |f: &dyn Fn(&SampleMetrics) -> Option<f64>| {
        let v: Vec<f64> = rows.iter().filter_map(f).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    MeanMetrics {
        count: rows.len(),
        psnr_y: mean(&|r| Some(r.psnr_y)),
        ssim: mean(&|r| Some(r.ssim)),
        hf_energy: mean(&|r| Some(r.hf_energy)),
        hf_textured: mean(&|r| r.hf_textured),
        hf_flat: mean(&|r| r.hf_flat),
    }
}

pub fn evaluate_images(images: &[ImagePlane], samples: &[PreparedSample]) -> Result<Vec<SampleMetrics>> {
    if images.len() != samples.len() {
        return Err(Error::Shape(format!("{} images for {} samples", images.len(), samples.len())));
    }
    images.iter().zip(samples).map(|(i, s)| sample_metrics(i, s)).collect()
}

/// The bicubic baseline: the upsampled LQ images themselves.
pub fn bicubic_images(samples: &[PreparedSample]) -> Vec<ImagePlane> {
    samples.iter().map(|s| s.x_l.clamped()).collect()
}
