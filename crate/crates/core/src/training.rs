//! Optimisation: VAE warm-up, base U-Net pretraining, stage 1 (all adapters and LQ
//! modulation, content/perceptual/adversarial losses) and stage 2 (cross-attention adapters,
//! distillation against the frozen stage-1 model and the positive-area attention loss).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use osr_autodiff::{AdamW, AdamWConfig, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::splitmix64;
use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::networks::checkpoint::OptimStates;
use crate::networks::lora::{AdapterSet, AdapterSets};
use crate::networks::{disc, is_stage2_adapter, Model};
use crate::pipeline::{
    batch_noise, diffuse_graph, lambdas, restoration_graph, stack_images, PreparedSample,
};
use crate::schedule::TimestepRange;
use crate::tmg::{aggregate_attention_graph, positive_area_loss, slot_masks, NounMaskSet};
use crate::vocab::PROMPT_LEN;

/// Per-step generator: a pure function of `(seed, step)`.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(step as u64 ^ 0x5eed)))
}

fn pick_batch<'a>(data: &'a [PreparedSample], n: usize, rng: &mut ChaCha8Rng) -> Vec<&'a PreparedSample> {
    (0..n).map(|_| &data[rng.random_range(0..data.len())]).collect()
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub phase: String,
    pub step: usize,
    /// Unweighted loss terms.
    pub components: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
    /// `Σ weight · component`, the optimised objective.
    pub total: f64,
    /// Discriminator objective, stepped separately.
    pub disc: Option<f64>,
    pub wall_secs: f64,
}

impl LossReport {
    fn new(phase: &str, step: usize, terms: &[(&str, f64, f64)], total: f64) -> Self {
        Self {
            phase: phase.to_string(),
            step,
            components: terms.iter().map(|(k, v, _)| (k.to_string(), *v)).collect(),
            weights: terms.iter().map(|(k, _, w)| (k.to_string(), *w)).collect(),
            total,
            disc: None,
            wall_secs: 0.0,
        }
    }

    /// Recomputes the weighted sum of the components.
    pub fn weighted_sum(&self) -> f64 {
        self.components.iter().map(|(k, v)| v * self.weights[k]).sum()
    }
}

/// Appends JSON lines to a file.
pub struct TrainLog {
    file: std::fs::File,
    path: std::path::PathBuf,
}

impl TrainLog {
    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, r: &LossReport) -> Result<()> {
        let line = serde_json::to_string(r).expect("serialisable report");
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical {
            step,
            what: what.to_string(),
        })
    }
}

/// Backpropagates `loss`, checks the gradients and applies one optimiser step to the
/// trainable parameters of `store` that appear in the graph.
fn apply(
    g: &Graph<f32>,
    loss: Var,
    store: &mut ParamStore<f32>,
    opt: &mut AdamW<f32>,
    step: usize,
) -> Result<()> {
    let grads = g.backward(loss);
    let pg = g.param_grads(&grads);
    if pg.iter().any(|(_, t)| !t.all_finite()) {
        return Err(Error::Numerical {
            step,
            what: "gradient".into(),
        });
    }
    opt.step(store, &pg);
    Ok(())
}

fn l1(g: &mut Graph<f32>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.abs(d);
    g.mean_all(d)
}

fn mse(g: &mut Graph<f32>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.sqr(d);
    g.mean_all(d)
}

/// Mean squared distance between frozen early-encoder features.
pub fn perceptual_graph(g: &mut Graph<f32>, model: &Model<f32>, a: Var, b: Var) -> Var {
    let fa = model.features(g, a);
    let fb = model.features(g, b);
    mse(g, fa, fb)
}

pub fn perceptual_distance(model: &Model<f32>, a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    a.same_shape(b)?;
    let mut g = Graph::new();
    let a = g.constant(stack_images(&[a])?);
    let b = g.constant(stack_images(&[b])?);
    let d = perceptual_graph(&mut g, model, a, b);
    Ok(g.value(d).item() as f64)
}

/// `(generator loss, discriminator loss)` for image batches `N×3×H×W`. The generator term
/// sees `fake` through the graph; the discriminator term sees both detached.
pub fn adversarial_terms(g: &mut Graph<f32>, disc_store: &ParamStore<f32>, real: Var, fake: Var) -> (Var, Var) {
    let fake_logits = disc::forward(disc_store, g, fake);
    let gen = disc::generator_loss(g, fake_logits);
    let real_d = g.detach(real);
    let fake_d = g.detach(fake);
    let lr = disc::forward(disc_store, g, real_d);
    let lf = disc::forward(disc_store, g, fake_d);
    let dl = disc::discriminator_loss(g, lr, lf);
    (gen, dl)
}

// ------------------------------------------------------------------ VAE warm-up

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub kl_weight: f64,
    /// Probability that a batch item is the upsampled LQ image instead of the HQ one.
    pub lq_fraction: f64,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 16,
            lr: 2e-3,
            kl_weight: 1e-6,
            lq_fraction: 0.25,
            seed: 11,
        }
    }
}

/// Cosine decay from `base` to 5% of `base` over `steps`.
pub fn cosine_lr(base: f64, step: usize, steps: usize) -> f64 {
    let p = step as f64 / steps.max(1) as f64;
    base * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

/// Reconstruction warm-up of the VAE on HQ and upsampled-LQ images, then sets the latent
/// scale so encoded HQ latents have unit standard deviation.
pub fn train_vae(
    model: &mut Model<f32>,
    data: &[PreparedSample],
    cfg: &VaeTrainConfig,
    mut on_step: impl FnMut(&LossReport),
) -> Result<()> {
    if data.is_empty() || cfg.batch_size == 0 || cfg.lr <= 0.0 || !(0.0..=1.0).contains(&cfg.lq_fraction) {
        return Err(Error::Config(
            "VAE training needs data, batch_size >= 1, lr > 0 and lq_fraction in [0, 1]".into(),
        ));
    }
    model.set_trainable(|n| n.starts_with("vae."));
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let t0 = Instant::now();
    for step in 0..cfg.steps {
        opt.config.lr = cosine_lr(cfg.lr, step, cfg.steps);
        let mut rng = step_rng(cfg.seed, step);
        let batch = pick_batch(data, cfg.batch_size, &mut rng);
        let imgs: Vec<&ImagePlane> = batch
            .iter()
            .map(|s| if rng.random_bool(cfg.lq_fraction) { &s.x_l } else { &s.hq })
            .collect();
        let mut g = Graph::new();
        let x = g.constant(stack_images(&imgs)?);
        let (mean, logvar) = model.encode_moments(&mut g, AdapterSets::NONE, x);
        let shape = g.shape(mean).to_vec();
        let eps = g.constant(Tensor::from_fn(&shape, |_| rng.sample::<f32, _>(StandardNormal)));
        let half = g.scale(logvar, 0.5);
        let std = g.exp(half);
        let noise = g.mul(std, eps);
        let z = g.add(mean, noise);
        let recon = crate::networks::vae::decode(&model.ctx(AdapterSets::NONE), &mut g, &model.config.vae, z);
        let rec = l1(&mut g, recon, x);
        // KL(q || N(0, I)) per latent element
        let m2 = g.sqr(mean);
        let ev = g.exp(logvar);
        let kl = g.add(m2, ev);
        let kl = g.sub(kl, logvar);
        let kl = g.offset(kl, -1.0);
        let kl = g.mean_all(kl);
        let kl = g.scale(kl, 0.5);
        let klw = g.scale(kl, cfg.kl_weight);
        let loss = g.add(rec, klw);
        let (rv, kv, tv) = (
            g.value(rec).item() as f64,
            g.value(kl).item() as f64,
            g.value(loss).item() as f64,
        );
        check_finite(step, "vae loss", tv)?;
        apply(&g, loss, &mut model.store, &mut opt, step)?;
        let mut rep = LossReport::new("vae", step, &[("recon_l1", rv, 1.0), ("kl", kv, cfg.kl_weight)], tv);
        rep.wall_secs = t0.elapsed().as_secs_f64();
        on_step(&rep);
    }
    model.latent_scale = 1.0 / latent_std(model, data)?;
    model.set_trainable(|_| false);
    Ok(())
}

/// Standard deviation of unscaled encoder means over (up to 64) HQ images.
fn latent_std(model: &Model<f32>, data: &[PreparedSample]) -> Result<f64> {
    let mut vals: Vec<f64> = Vec::new();
    for chunk in data[..data.len().min(64)].chunks(16) {
        let imgs: Vec<&ImagePlane> = chunk.iter().map(|s| &s.hq).collect();
        let mut g = Graph::new();
        let x = g.constant(stack_images(&imgs)?);
        let (mean, _) = model.encode_moments(&mut g, AdapterSets::NONE, x);
        vals.extend(g.value(mean).data().iter().map(|&v| v as f64));
    }
    let n = vals.len() as f64;
    let mu = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::Numerical {
            step: 0,
            what: "latent variance".into(),
        });
    }
    Ok(var.sqrt())
}

// ------------------------------------------------------------------ base U-Net

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            lr: 1e-3,
            seed: 12,
        }
    }
}

/// Noise-prediction pretraining of the base U-Net on encoded HQ latents over the full
/// timestep range, without LQ modulation.
pub fn train_base(
    model: &mut Model<f32>,
    data: &[PreparedSample],
    cfg: &BaseTrainConfig,
    mut on_step: impl FnMut(&LossReport),
) -> Result<()> {
    if data.is_empty() || cfg.batch_size == 0 || cfg.lr <= 0.0 {
        return Err(Error::Config("base training needs data, batch_size >= 1 and lr > 0".into()));
    }
    // the VAE is frozen here, so latents are computed once
    model.set_trainable(|_| false);
    let mut latents: Vec<Tensor<f32>> = Vec::with_capacity(data.len());
    for chunk in data.chunks(16) {
        let imgs: Vec<&ImagePlane> = chunk.iter().map(|s| &s.hq).collect();
        let mut g = Graph::new();
        let x = g.constant(stack_images(&imgs)?);
        let z = model.encode(&mut g, AdapterSets::NONE, x);
        let zv = g.value(z);
        let per = zv.numel() / chunk.len();
        let shape = &zv.shape()[1..];
        for n in 0..chunk.len() {
            latents.push(Tensor::from_vec(shape, zv.data()[n * per..(n + 1) * per].to_vec()).expect("shape"));
        }
    }
    model.set_trainable(|n| n.starts_with("unet."));
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let steps_total = model.schedule.steps();
    let t0 = Instant::now();
    for step in 0..cfg.steps {
        let mut rng = step_rng(cfg.seed, step);
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let ts: Vec<usize> = idx.iter().map(|_| rng.random_range(1..=steps_total)).collect();
        let lshape = latents[0].shape().to_vec();
        let per = latents[0].numel();
        let mut z0 = Vec::with_capacity(per * idx.len());
        for &i in &idx {
            z0.extend_from_slice(latents[i].data());
        }
        let mut shape = vec![idx.len()];
        shape.extend(&lshape);
        let mut g = Graph::new();
        let z0 = g.constant(Tensor::from_vec(&shape, z0).expect("shape"));
        let eps = g.constant(Tensor::from_fn(&shape, |_| rng.sample::<f32, _>(StandardNormal)));
        let z_t = diffuse_graph(&mut g, model, z0, eps, &ts)?;
        let tokens: Vec<Vec<usize>> = idx.iter().map(|&i| data[i].tokens.clone()).collect();
        let out = model.unet(&mut g, AdapterSets::NONE, z_t, &ts, &tokens, None)?;
        let loss = mse(&mut g, out.eps, eps);
        let lv = g.value(loss).item() as f64;
        check_finite(step, "base loss", lv)?;
        apply(&g, loss, &mut model.store, &mut opt, step)?;
        let mut rep = LossReport::new("base", step, &[("eps_mse", lv, 1.0)], lv);
        rep.wall_secs = t0.elapsed().as_secs_f64();
        on_step(&rep);
    }
    model.set_trainable(|_| false);
    Ok(())
}

// ------------------------------------------------------------------ stage 1

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Stage1Weights {
    pub content: f64,
    pub perceptual: f64,
    pub adversarial: f64,
}

impl Default for Stage1Weights {
    fn default() -> Self {
        Self {
            content: 1.0,
            perceptual: 1.0,
            adversarial: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Stage1Config {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub disc_lr: f64,
    pub weights: Stage1Weights,
    pub timestep_range: TimestepRange,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 5e-5,
            disc_lr: 5e-5,
            weights: Stage1Weights::default(),
            timestep_range: TimestepRange::TRAIN_DEFAULT,
            seed: 13,
        }
    }
}

impl Stage1Config {
    pub fn validate<T: osr_autodiff::Scalar>(&self, model: &Model<T>) -> Result<()> {
        let w = &self.weights;
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.disc_lr > 0.0) {
            return Err(Error::Config("stage 1 needs batch_size >= 1 and positive learning rates".into()));
        }
        if w.content < 0.0 || w.perceptual < 0.0 || w.adversarial < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        self.timestep_range.validate(&model.schedule)
    }
}

/// Stage-1 training state: generator and discriminator optimisers plus the discriminator.
pub struct Stage1Trainer {
    pub cfg: Stage1Config,
    pub disc: ParamStore<f32>,
    pub gen_opt: AdamW<f32>,
    pub disc_opt: AdamW<f32>,
    pub step: usize,
}

pub fn is_stage1_trainable(name: &str) -> bool {
    name.starts_with(AdapterSet::Stage1.prefix()) || name.starts_with("lqfm.")
}

impl Stage1Trainer {
    /// Injects the stage-1 adapters if absent and marks adapters and LQ modulation trainable.
    pub fn new(model: &mut Model<f32>, cfg: Stage1Config) -> Result<Self> {
        cfg.validate(model)?;
        if model.has_adapters(AdapterSet::Stage2) {
            return Err(Error::State("stage-2 adapters already present".into()));
        }
        if !model.has_adapters(AdapterSet::Stage1) {
            model.inject_stage1(splitmix64(cfg.seed ^ 0x51))?;
        }
        let use_lqfm = model.config.use_lqfm;
        model.set_trainable(|n| n.starts_with(AdapterSet::Stage1.prefix()) || (use_lqfm && n.starts_with("lqfm.")));
        Ok(Self {
            disc: disc::init(splitmix64(cfg.seed ^ 0xd15c)),
            gen_opt: AdamW::new(AdamWConfig {
                lr: cfg.lr,
                ..Default::default()
            }),
            disc_opt: AdamW::new(AdamWConfig {
                lr: cfg.disc_lr,
                ..Default::default()
            }),
            cfg,
            step: 0,
        })
    }

    pub fn restore_state(&mut self, optim: &OptimStates<f32>, disc: Option<ParamStore<f32>>, step: usize) {
        if let Some(s) = optim.get("gen") {
            self.gen_opt.set_state(s.clone());
        }
        if let Some(s) = optim.get("disc") {
            self.disc_opt.set_state(s.clone());
        }
        if let Some(d) = disc {
            self.disc = d;
        }
        self.step = step;
    }

    pub fn optim_states(&self) -> OptimStates<f32> {
        let mut o = OptimStates::new();
        o.insert("gen".into(), self.gen_opt.state().clone());
        o.insert("disc".into(), self.disc_opt.state().clone());
        o
    }

    pub fn step(&mut self, model: &mut Model<f32>, data: &[PreparedSample]) -> Result<LossReport> {
        let t0 = Instant::now();
        let step = self.step;
        let cfg = self.cfg;
        let mut rng = step_rng(cfg.seed, step);
        let batch = pick_batch(data, cfg.batch_size, &mut rng);
        let ts: Vec<usize> = batch.iter().map(|_| cfg.timestep_range.sample(&mut rng)).collect();
        let mut rngs: Vec<ChaCha8Rng> = (0..batch.len())
            .map(|_| ChaCha8Rng::seed_from_u64(rng.random()))
            .collect();
        let noise = batch_noise(model, &batch, &mut rngs)?;

        let mut g = Graph::new();
        let r = restoration_graph(&mut g, model, AdapterSets::STAGE1, &batch, &ts, noise)?;
        let hq: Vec<&ImagePlane> = batch.iter().map(|s| &s.hq).collect();
        let hq = g.constant(stack_images(&hq)?);
        let content = l1(&mut g, r.x_hat, hq);
        let perc = perceptual_graph(&mut g, model, r.x_hat, hq);
        self.disc.set_trainable_where(|_| false);
        let fake_logits = disc::forward(&self.disc, &mut g, r.x_hat);
        self.disc.set_trainable_where(|_| true);
        let gen_adv = disc::generator_loss(&mut g, fake_logits);
        let w = cfg.weights;
        let a = g.scale(content, w.content);
        let b = g.scale(perc, w.perceptual);
        let c = g.scale(gen_adv, w.adversarial);
        let ab = g.add(a, b);
        let total = g.add(ab, c);
        let vals = [
            ("content", g.value(content).item() as f64, w.content),
            ("perceptual", g.value(perc).item() as f64, w.perceptual),
            ("adversarial", g.value(gen_adv).item() as f64, w.adversarial),
        ];
        let tv = g.value(total).item() as f64;
        check_finite(step, "stage-1 loss", tv)?;
        apply(&g, total, &mut model.store, &mut self.gen_opt, step)?;

        // discriminator step on the same (detached) batch
        let fake = g.value(r.x_hat).clone();
        let real = g.value(hq).clone();
        drop(g);
        let mut gd = Graph::new();
        let real = gd.constant(real);
        let fake = gd.constant(fake);
        let lr = disc::forward(&self.disc, &mut gd, real);
        let lf = disc::forward(&self.disc, &mut gd, fake);
        let dl = disc::discriminator_loss(&mut gd, lr, lf);
        let dv = gd.value(dl).item() as f64;
        check_finite(step, "discriminator loss", dv)?;
        apply(&gd, dl, &mut self.disc, &mut self.disc_opt, step)?;

        let mut rep = LossReport::new("stage1", step, &vals, tv);
        rep.disc = Some(dv);
        rep.wall_secs = t0.elapsed().as_secs_f64();
        self.step += 1;
        Ok(rep)
    }
}

// ------------------------------------------------------------------ stage 2

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Stage2Config {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eta_pos: f64,
    pub vsd_weight: f64,
    pub content_weight: f64,
    pub perceptual_weight: f64,
    pub timestep_range: TimestepRange,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 16,
            lr: 5e-5,
            eta_pos: 1.0,
            vsd_weight: 2.0,
            content_weight: 1.0,
            perceptual_weight: 1.0,
            timestep_range: TimestepRange::TRAIN_DEFAULT,
            seed: 14,
        }
    }
}

impl Stage2Config {
    pub fn validate<T: osr_autodiff::Scalar>(&self, model: &Model<T>) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("stage 2 needs batch_size >= 1 and lr > 0".into()));
        }
        if self.eta_pos < 0.0 || self.vsd_weight < 0.0 || self.content_weight < 0.0 || self.perceptual_weight < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        self.timestep_range.validate(&model.schedule)
    }
}

pub struct Stage2Trainer {
    pub cfg: Stage2Config,
    pub opt: AdamW<f32>,
    pub step: usize,
}

impl Stage2Trainer {
    /// Requires a stage-1 model; freezes everything and trains fresh cross-attention adapters.
    pub fn new(model: &mut Model<f32>, cfg: Stage2Config) -> Result<Self> {
        cfg.validate(model)?;
        if !model.has_adapters(AdapterSet::Stage1) {
            return Err(Error::State("stage 2 requires a stage-1 model".into()));
        }
        if !model.has_adapters(AdapterSet::Stage2) {
            model.inject_stage2(splitmix64(cfg.seed ^ 0x52))?;
        }
        model.set_trainable(is_stage2_adapter);
        Ok(Self {
            opt: AdamW::new(AdamWConfig {
                lr: cfg.lr,
                ..Default::default()
            }),
            cfg,
            step: 0,
        })
    }

    pub fn restore_state(&mut self, optim: &OptimStates<f32>, step: usize) {
        if let Some(s) = optim.get("gen") {
            self.opt.set_state(s.clone());
        }
        self.step = step;
    }

    pub fn optim_states(&self) -> OptimStates<f32> {
        let mut o = OptimStates::new();
        o.insert("gen".into(), self.opt.state().clone());
        o
    }

    pub fn step(&mut self, model: &mut Model<f32>, data: &[PreparedSample]) -> Result<LossReport> {
        let t0 = Instant::now();
        let step = self.step;
        let cfg = self.cfg;
        let mut rng = step_rng(cfg.seed, step);
        let batch = pick_batch(data, cfg.batch_size, &mut rng);
        let ts: Vec<usize> = batch.iter().map(|_| cfg.timestep_range.sample(&mut rng)).collect();
        let mut rngs: Vec<ChaCha8Rng> = (0..batch.len())
            .map(|_| ChaCha8Rng::seed_from_u64(rng.random()))
            .collect();
        let noise = batch_noise(model, &batch, &mut rngs)?;

        let mut g = Graph::new();
        let r = restoration_graph(&mut g, model, AdapterSets::ALL, &batch, &ts, noise)?;
        let hq: Vec<&ImagePlane> = batch.iter().map(|s| &s.hq).collect();
        let hq = g.constant(stack_images(&hq)?);
        let content = l1(&mut g, r.x_hat, hq);
        let perc = perceptual_graph(&mut g, model, r.x_hat, hq);

        // distillation: re-noise the detached restored latent at a fresh timestep and match
        // the frozen stage-1 model's noise prediction
        let z_h = g.detach(r.z_h);
        let t2: Vec<usize> = batch.iter().map(|_| cfg.timestep_range.sample(&mut rng)).collect();
        let shape = g.shape(z_h).to_vec();
        let eps2 = g.constant(Tensor::from_fn(&shape, |_| rng.sample::<f32, _>(StandardNormal)));
        let z2 = diffuse_graph(&mut g, model, z_h, eps2, &t2)?;
        let tokens: Vec<Vec<usize>> = batch.iter().map(|s| s.tokens.clone()).collect();
        let x_l: Vec<&ImagePlane> = batch.iter().map(|s| &s.x_l).collect();
        let x_l = g.constant(stack_images(&x_l)?);
        let lam = lambdas(model, &t2)?;
        let lq = crate::networks::LqfmInput { x_l, lambdas: &lam };
        let lqfm = model.config.use_lqfm.then_some(&lq);
        let student = model.unet(&mut g, AdapterSets::ALL, z2, &t2, &tokens, lqfm)?;
        let teacher = model.unet(&mut g, AdapterSets::STAGE1, z2, &t2, &tokens, lqfm)?;
        let distill = mse(&mut g, student.eps, teacher.eps);

        let pos = if cfg.eta_pos > 0.0 {
            let masks: Vec<NounMaskSet> = batch.iter().map(|s| s.masks.clone()).collect();
            Some(tmg_loss(&mut g, &r.unet.attn, &r.unet.attn_sizes, &masks))
        } else {
            None
        };

        let a = g.scale(content, cfg.content_weight);
        let b = g.scale(perc, cfg.perceptual_weight);
        let c = g.scale(distill, cfg.vsd_weight);
        let ab = g.add(a, b);
        let mut total = g.add(ab, c);
        if let Some(p) = pos {
            let d = g.scale(p, cfg.eta_pos);
            total = g.add(total, d);
        }
        let vals = [
            ("content", g.value(content).item() as f64, cfg.content_weight),
            ("perceptual", g.value(perc).item() as f64, cfg.perceptual_weight),
            ("distill", g.value(distill).item() as f64, cfg.vsd_weight),
            ("tmg", pos.map_or(0.0, |p| g.value(p).item() as f64), cfg.eta_pos),
        ];
        let tv = g.value(total).item() as f64;
        check_finite(step, "stage-2 loss", tv)?;
        apply(&g, total, &mut model.store, &mut self.opt, step)?;
        let mut rep = LossReport::new("stage2", step, &vals, tv);
        rep.wall_secs = t0.elapsed().as_secs_f64();
        self.step += 1;
        Ok(rep)
    }
}

/// Positive-area loss over every prompt slot of a batch, attention aggregated at the mask
/// resolution.
pub fn tmg_loss(g: &mut Graph<f32>, attn: &[Var], sizes: &[(usize, usize)], masks: &[NounMaskSet]) -> Var {
    let (h, w) = (masks[0].height, masks[0].width);
    let n = masks.len();
    let mut per_slot = Vec::with_capacity(PROMPT_LEN);
    for slot in 0..PROMPT_LEN {
        let a = aggregate_attention_graph(g, attn, sizes, slot, h, w);
        per_slot.push(g.reshape(a, &[n, 1, h * w]));
    }
    let all = g.concat(&per_slot, 1);
    let all = g.reshape(all, &[n * PROMPT_LEN, h * w]);
    let (m, v) = slot_masks(masks);
    positive_area_loss(g, all, &m, &v)
}

/// Mean in-mask attention fraction over all valid (sample, noun) pairs.
pub fn mean_in_mask_fraction(
    attn: &[Vec<crate::tmg::AttnLayer>],
    samples: &[PreparedSample],
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (layers, s) in attn.iter().zip(samples) {
        for e in s.masks.entries.iter().filter(|e| e.valid) {
            let a = crate::tmg::aggregate_attention(layers, &s.tokens, e.token, s.masks.height, s.masks.width)?;
            total += crate::tmg::in_mask_fraction(&a, &e.mask);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Domain("no valid noun masks".into()));
    }
    Ok(total / count as f64)
}

