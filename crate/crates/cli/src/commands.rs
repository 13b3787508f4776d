use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use osr_core::dataset::{generate, read_dataset, write_dataset, AnnotatedSample, DegradationParams, SceneConfig};
use osr_core::image::{ColorSpace, ImagePlane};
use osr_core::metrics::spearman;
use osr_core::networks::checkpoint::{self, Checkpoint, TrainState};
use osr_core::networks::lora::AdapterSet;
use osr_core::networks::{is_stage2_adapter, Model, ModelConfig};
use osr_core::pipeline::{
    bicubic_images, evaluate_images, mean_metrics, prepare, prepare_with_config, restore, PreparedSample,
};
use osr_core::schedule::{NoiseSchedule, TimestepRange};
use osr_core::tmg::filter_nouns;
use osr_core::training::{
    train_base, train_vae, BaseTrainConfig, LossReport, Stage1Config, Stage1Trainer, Stage2Config, Stage2Trainer,
    TrainLog, VaeTrainConfig,
};
use osr_core::vocab::tag_prompt;
use serde::Serialize;

use crate::args::{EvalArgs, GenDataArgs, InferArgs, Method, PretrainArgs, Stage, SweepArgs, TrainArgs};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub const MODEL_FILE: &str = "model.safetensors";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const EVAL_SCHEMA: &str = "osr-eval/1";
pub const SWEEP_SCHEMA: &str = "osr-sweep/1";

const LOG_EVERY: usize = 50;

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(osr_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serialisable config");
    std::fs::write(path, text + "\n").map_err(|e| io(path, e))
}

/// `config.json` next to a file output: `metrics.csv` gets `metrics.config.json`.
fn sidecar(out: &Path) -> PathBuf {
    out.with_extension(CONFIG_FILE)
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(osr_core::Error::MissingFile(path.to_path_buf()).into())
    }
}

fn require_dataset(dir: &Path) -> Result<()> {
    require_file(&dir.join("manifest.jsonl"))
}

fn model_path(run: &Path) -> PathBuf {
    run.join(MODEL_FILE)
}

fn load_run(run: &Path) -> Result<Checkpoint<f32>> {
    let path = model_path(run);
    require_file(&path)?;
    Ok(checkpoint::load(&path)?)
}

/// Restoration timesteps must lie in `[1, T]`.
fn check_timestep(model: &Model<f32>, t: usize) -> Result<()> {
    TimestepRange::new(t, t, &model.schedule)?;
    Ok(())
}

fn parent_dir(path: &Path) -> Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(p) => create_dir(p),
        None => Ok(()),
    }
}

// ------------------------------------------------------------------ gen-data

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let scene = SceneConfig {
        size: a.size,
        ..SceneConfig::default()
    };
    let degradation = DegradationParams {
        blur_sigma: a.blur_sigma,
        downscale: a.downscale,
        noise_sigma: a.noise_sigma,
        quant_block: a.quant_block,
    };
    scene.validate()?;
    degradation.validate(scene.size)?;
    if a.out.exists() {
        let non_empty = std::fs::read_dir(&a.out)
            .map_err(|e| io(&a.out, e))?
            .next()
            .is_some();
        if non_empty && !a.force {
            return Err(CliError::State(format!(
                "{} exists and is not empty; pass --force to replace it",
                a.out.display()
            )));
        }
        if non_empty {
            std::fs::remove_dir_all(&a.out).map_err(|e| io(&a.out, e))?;
        }
    }
    create_dir(&a.out)?;
    let samples = generate(a.count, a.seed, &scene, &degradation)?;
    write_dataset(&samples, &a.out)?;
    write_json(
        &a.out.join(CONFIG_FILE),
        &serde_json::json!({
            "command": "gen-data",
            "args": a,
            "scene": scene,
            "degradation": degradation,
        }),
    )?;
    info!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

// ------------------------------------------------------------------ pretrain

fn report(r: &LossReport, steps: usize) {
    if r.step % LOG_EVERY == 0 || r.step + 1 == steps {
        info!("{} step {} total {:.5} {:?}", r.phase, r.step, r.total, r.components);
    }
}

pub fn pretrain(a: &PretrainArgs) -> Result<()> {
    let mut config = ModelConfig::default();
    config.vae.base_width = a.vae_width;
    config.unet.base_width = a.unet_width;
    config.unet.time_dim = a.time_dim;
    config.unet.text_dim = a.text_dim;
    config.lqfm_hidden = a.lqfm_hidden;
    config.validate()?;
    require_dataset(&a.data)?;
    create_dir(&a.out)?;

    let mut model = Model::<f32>::new(config, NoiseSchedule::default(), a.seed)?;
    let data = prepare(&read_dataset(&a.data)?, &model)?;
    let vae = VaeTrainConfig {
        steps: a.vae_steps,
        batch_size: a.batch_size,
        lr: a.vae_lr,
        seed: a.seed,
        ..VaeTrainConfig::default()
    };
    let base = BaseTrainConfig {
        steps: a.base_steps,
        batch_size: a.batch_size,
        lr: a.base_lr,
        seed: a.seed.wrapping_add(1),
    };
    let mut log = fresh_log(&a.out)?;
    train_vae(&mut model, &data, &vae, |r| {
        report(r, vae.steps);
        log_row(&mut log, r);
    })?;
    train_base(&mut model, &data, &base, |r| {
        report(r, base.steps);
        log_row(&mut log, r);
    })?;
    let state = TrainState {
        phase: "base".into(),
        step: 0,
        seed: a.seed,
        notes: BTreeMap::new(),
    };
    checkpoint::save(&model_path(&a.out), &model, None, &BTreeMap::new(), &state)?;
    write_json(
        &a.out.join(CONFIG_FILE),
        &serde_json::json!({"command": "pretrain", "args": a, "model": model.config, "vae": vae, "base": base}),
    )?;
    Ok(())
}

fn fresh_log(dir: &Path) -> Result<TrainLog> {
    let path = dir.join(LOG_FILE);
    if path.exists() {
        std::fs::remove_file(&path).map_err(|e| io(&path, e))?;
    }
    Ok(TrainLog::append(&path)?)
}

fn log_row(log: &mut TrainLog, r: &LossReport) {
    if let Err(e) = log.write(r) {
        log::warn!("{e}");
    }
}

// ------------------------------------------------------------------ train

pub fn train(a: &TrainArgs) -> Result<()> {
    require_dataset(&a.data)?;
    let ckpt = load_run(&a.from)?;
    create_dir(&a.out)?;
    let resume_phase = match a.stage {
        Stage::One => "stage1",
        Stage::Two => "stage2",
    };
    let resume = ckpt.state.phase == resume_phase;
    let in_place = resume && same_dir(&a.from, &a.out);
    let mut log = if in_place {
        TrainLog::append(&a.out.join(LOG_FILE))?
    } else {
        fresh_log(&a.out)?
    };
    let stored_seed = ckpt.state.seed;
    let seed_default = |d: u64| a.seed.or(resume.then_some(stored_seed)).unwrap_or(d);
    let Checkpoint {
        mut model,
        disc,
        optim,
        state,
    } = ckpt;
    let range = |d: TimestepRange| -> Result<TimestepRange> {
        Ok(TimestepRange::new(
            a.t_min.unwrap_or(d.t_min),
            a.t_max.unwrap_or(d.t_max),
            &model.schedule,
        )?)
    };

    let (saved_state, config_echo) = match a.stage {
        Stage::One => {
            let d = Stage1Config::default();
            let cfg = Stage1Config {
                steps: a.steps.unwrap_or(d.steps),
                batch_size: a.batch_size.unwrap_or(d.batch_size),
                lr: a.lr.unwrap_or(d.lr),
                disc_lr: a.disc_lr.unwrap_or(d.disc_lr),
                timestep_range: range(d.timestep_range)?,
                seed: seed_default(d.seed),
                ..d
            };
            if a.no_rgpa {
                model.config.use_rgpa = false;
            }
            if a.no_lqfm {
                model.config.use_lqfm = false;
            }
            let data = load_data(&a.data, &model)?;
            let mut tr = Stage1Trainer::new(&mut model, cfg)?;
            if resume {
                tr.restore_state(&optim, disc, state.step as usize);
            }
            for _ in 0..cfg.steps {
                let r = tr.step(&mut model, &data)?;
                report(&r, tr.step.max(cfg.steps));
                log_row(&mut log, &r);
            }
            let st = TrainState {
                phase: "stage1".into(),
                step: tr.step as u64,
                seed: cfg.seed,
                notes: BTreeMap::new(),
            };
            checkpoint::save(&model_path(&a.out), &model, Some(&tr.disc), &tr.optim_states(), &st)?;
            (st, serde_json::to_value(cfg).expect("config"))
        }
        Stage::Two => {
            if !model.has_adapters(AdapterSet::Stage1) {
                return Err(CliError::State(format!(
                    "{} is not a stage-1 checkpoint (phase `{}`)",
                    model_path(&a.from).display(),
                    state.phase
                )));
            }
            let d = Stage2Config::default();
            let cfg = Stage2Config {
                steps: a.steps.unwrap_or(d.steps),
                batch_size: a.batch_size.unwrap_or(d.batch_size),
                lr: a.lr.unwrap_or(d.lr),
                eta_pos: if a.no_tmg { 0.0 } else { a.eta_pos.unwrap_or(d.eta_pos) },
                timestep_range: range(d.timestep_range)?,
                seed: seed_default(d.seed),
                ..d
            };
            let data = load_data(&a.data, &model)?;
            let frozen = model.param_hash(is_stage2_adapter);
            let mut tr = Stage2Trainer::new(&mut model, cfg)?;
            if resume {
                tr.restore_state(&optim, state.step as usize);
            }
            for _ in 0..cfg.steps {
                let r = tr.step(&mut model, &data)?;
                report(&r, tr.step.max(cfg.steps));
                log_row(&mut log, &r);
            }
            if model.param_hash(is_stage2_adapter) != frozen {
                return Err(CliError::State("frozen parameters changed during stage 2".into()));
            }
            let mut notes = BTreeMap::new();
            notes.insert("frozen_sha256".to_string(), frozen);
            let st = TrainState {
                phase: "stage2".into(),
                step: tr.step as u64,
                seed: cfg.seed,
                notes,
            };
            checkpoint::save(&model_path(&a.out), &model, None, &tr.optim_states(), &st)?;
            (st, serde_json::to_value(cfg).expect("config"))
        }
    };
    write_json(
        &a.out.join(CONFIG_FILE),
        &serde_json::json!({
            "command": "train",
            "args": a,
            "stage_config": config_echo,
            "model": model.config,
            "state": saved_state,
        }),
    )?;
    Ok(())
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn load_data(dir: &Path, model: &Model<f32>) -> Result<Vec<PreparedSample>> {
    let samples = read_dataset(dir)?;
    if samples.is_empty() {
        return Err(CliError::State(format!("dataset {} is empty", dir.display())));
    }
    Ok(prepare(&samples, model)?)
}

// ------------------------------------------------------------------ infer

fn lq_sample(lq: ImagePlane, nouns: &[String], downscale: usize) -> AnnotatedSample {
    let (h, w) = (lq.height() * downscale, lq.width() * downscale);
    AnnotatedSample {
        seed: 0,
        hq: ImagePlane::filled(h, w, ColorSpace::Rgb, 0.0),
        lq,
        nouns: nouns.to_vec(),
        prompt: Vec::new(),
        masks: vec![vec![false; h * w]; nouns.len()],
        texture: vec![false; h * w],
    }
}

pub fn infer(a: &InferArgs) -> Result<()> {
    for p in &a.input {
        require_file(p)?;
    }
    let model = load_run(&a.checkpoint)?.model;
    check_timestep(&model, a.timestep)?;
    let nouns = filter_nouns(&tag_prompt(&a.prompt));
    osr_core::vocab::encode_nouns(&nouns)?;
    create_dir(&a.out)?;
    for p in &a.input {
        let lq = ImagePlane::load_png(p)?;
        let sample = prepare_with_config(&lq_sample(lq, &nouns, model.config.vae.downscale), &model.config)?;
        let out = restore(&model, &[sample], a.timestep, a.seed)?;
        let name = p.file_name().map(PathBuf::from).unwrap_or_else(|| "out.png".into());
        let target = a.out.join(name).with_extension("png");
        out[0].save_png(&target)?;
        info!("{} -> {}", p.display(), target.display());
    }
    write_json(
        &a.out.join(CONFIG_FILE),
        &serde_json::json!({"command": "infer", "args": a, "nouns": nouns, "model": model.config}),
    )?;
    Ok(())
}

// ------------------------------------------------------------------ eval

#[derive(Serialize)]
struct EvalRow {
    sample: String,
    psnr_y: f64,
    ssim: f64,
    hf_energy: f64,
    hf_textured: Option<f64>,
    hf_flat: Option<f64>,
}

const EVAL_HEADER: [&str; 6] = ["sample", "psnr_y", "ssim", "hf_energy", "hf_textured", "hf_flat"];

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    require_dataset(&a.data)?;
    let model = match (&a.checkpoint, a.method) {
        (Some(c), _) => Some(load_run(c)?.model),
        (None, Method::Model) => return Err(CliError::Usage("--method model needs --checkpoint".into())),
        (None, _) => None,
    };
    let config = model.as_ref().map_or_else(ModelConfig::default, |m| m.config);
    if let (Some(m), Method::Model) = (&model, a.method) {
        check_timestep(m, a.timestep)?;
    }
    parent_dir(&a.out)?;
    let samples = read_dataset(&a.data)?;
    let data: Vec<PreparedSample> = samples
        .iter()
        .map(|s| prepare_with_config(s, &config))
        .collect::<osr_core::Result<_>>()?;
    let images = match (a.method, &model) {
        (Method::Model, Some(m)) => restore(m, &data, a.timestep, a.seed)?,
        (Method::Bicubic, _) => bicubic_images(&data),
        _ => data.iter().map(|s| s.hq.clone()).collect(),
    };
    let rows = evaluate_images(&images, &data)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&a.out)?;
    w.write_record(EVAL_HEADER)?;
    for (s, r) in data.iter().zip(&rows) {
        w.serialize(EvalRow {
            sample: s.seed.to_string(),
            psnr_y: r.psnr_y,
            ssim: r.ssim,
            hf_energy: r.hf_energy,
            hf_textured: r.hf_textured,
            hf_flat: r.hf_flat,
        })?;
    }
    if !rows.is_empty() {
        let m = mean_metrics(&rows);
        w.serialize(EvalRow {
            sample: "mean".into(),
            psnr_y: m.psnr_y,
            ssim: m.ssim,
            hf_energy: m.hf_energy,
            hf_textured: finite(m.hf_textured),
            hf_flat: finite(m.hf_flat),
        })?;
        info!("{} samples: psnr_y {:.3} ssim {:.4} hf {:.4}", m.count, m.psnr_y, m.ssim, m.hf_energy);
    }
    w.flush().map_err(|e| io(&a.out, e))?;
    write_json(
        &sidecar(&a.out),
        &serde_json::json!({"command": "eval", "args": a, "csv_schema": EVAL_SCHEMA, "model": config}),
    )?;
    Ok(())
}

// ------------------------------------------------------------------ sweep-timestep

#[derive(Serialize)]
struct SweepRow {
    t_s: usize,
    psnr_y: f64,
    ssim: f64,
    hf_energy: f64,
    hf_textured: Option<f64>,
    hf_flat: Option<f64>,
}

pub fn sweep_timestep(a: &SweepArgs) -> Result<()> {
    let mut ts = a.timesteps.clone();
    ts.sort_unstable();
    ts.dedup();
    if ts.len() < 2 {
        return Err(CliError::Usage("sweep needs at least two distinct timesteps".into()));
    }
    require_dataset(&a.data)?;
    let model = load_run(&a.checkpoint)?.model;
    for &t in &ts {
        check_timestep(&model, t)?;
    }
    parent_dir(&a.out)?;
    let data = prepare(&read_dataset(&a.data)?, &model)?;
    let mut w = csv::Writer::from_path(&a.out)?;
    let mut means = Vec::with_capacity(ts.len());
    for &t in &ts {
        let m = mean_metrics(&evaluate_images(&restore(&model, &data, t, a.seed)?, &data)?);
        info!("t_s {t}: psnr_y {:.3} ssim {:.4} hf {:.4}", m.psnr_y, m.ssim, m.hf_energy);
        w.serialize(SweepRow {
            t_s: t,
            psnr_y: m.psnr_y,
            ssim: m.ssim,
            hf_energy: m.hf_energy,
            hf_textured: finite(m.hf_textured),
            hf_flat: finite(m.hf_flat),
        })?;
        means.push(m);
    }
    w.flush().map_err(|e| io(&a.out, e))?;
    let t: Vec<f64> = ts.iter().map(|&v| v as f64).collect();
    let psnr: Vec<f64> = means.iter().map(|m| m.psnr_y).collect();
    let hf: Vec<f64> = means.iter().map(|m| m.hf_energy).collect();
    if let (Ok(rp), Ok(rh)) = (spearman(&t, &psnr), spearman(&t, &hf)) {
        info!("spearman(t_s, psnr_y) {rp:.3}, spearman(t_s, hf_energy) {rh:.3}");
    }
    write_json(
        &sidecar(&a.out),
        &serde_json::json!({"command": "sweep-timestep", "args": a, "csv_schema": SWEEP_SCHEMA, "timesteps": ts}),
    )?;
    Ok(())
}
