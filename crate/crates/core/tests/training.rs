use osr_autodiff::{AdamW, AdamWConfig, Graph};
use osr_core::dataset::{generate, DegradationParams, SceneConfig};
use osr_core::error::Error;
use osr_core::image::{ColorSpace, ImagePlane};
use osr_core::networks::{disc, is_stage2_adapter, Model, ModelConfig};
use osr_core::pipeline::{prepare, stack_images, PreparedSample};
use osr_core::schedule::NoiseSchedule;
use osr_core::training::{
    adversarial_terms, cosine_lr, is_stage1_trainable, perceptual_distance, LossReport, Stage1Config,
    Stage1Trainer, Stage1Weights, Stage2Config, Stage2Trainer, TrainLog,
};

fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::default();
    c.vae.base_width = 8;
    c.unet.base_width = 8;
    c.unet.time_dim = 16;
    c.unet.text_dim = 8;
    c.lqfm_hidden = 4;
    c.lora.rank_unet = 2;
    c.lora.rank_crossattn_stage2 = 2;
    c
}

fn setup(n: usize) -> (Model<f32>, Vec<PreparedSample>) {
    let model = Model::new(tiny_config(), NoiseSchedule::default(), 1).unwrap();
    let samples = generate(n, 3, &SceneConfig::default(), &DegradationParams::default()).unwrap();
    let data = prepare(&samples, &model).unwrap();
    (model, data)
}

fn s1_config() -> Stage1Config {
    Stage1Config {
        batch_size: 2,
        lr: 1e-3,
        disc_lr: 1e-3,
        ..Default::default()
    }
}

fn s2_config(eta: f64) -> Stage2Config {
    Stage2Config {
        batch_size: 2,
        lr: 1e-3,
        eta_pos: eta,
        ..Default::default()
    }
}

fn run_stage1(steps: usize) -> Vec<LossReport> {
    let (mut model, data) = setup(6);
    let mut tr = Stage1Trainer::new(&mut model, s1_config()).unwrap();
    (0..steps).map(|_| tr.step(&mut model, &data).unwrap()).collect()
}

fn trajectory(r: &[LossReport]) -> Vec<(f64, Option<f64>)> {
    r.iter().map(|r| (r.total, r.disc)).collect()
}

#[test]
fn stage1_is_deterministic() {
    let a = run_stage1(10);
    let b = run_stage1(10);
    assert_eq!(trajectory(&a), trajectory(&b));
    assert!(a.iter().all(|r| r.total.is_finite()));
}

#[test]
fn reported_totals_match_weighted_components() {
    for r in run_stage1(3) {
        assert!((r.total - r.weighted_sum()).abs() <= 1e-6 * r.total.abs().max(1.0));
        assert_eq!(r.components.len(), 3);
    }
    let (mut model, data) = setup(6);
    let mut s1 = Stage1Trainer::new(&mut model, s1_config()).unwrap();
    s1.step(&mut model, &data).unwrap();
    let mut s2 = Stage2Trainer::new(&mut model, s2_config(1.0)).unwrap();
    for _ in 0..3 {
        let r = s2.step(&mut model, &data).unwrap();
        assert!((r.total - r.weighted_sum()).abs() <= 1e-6 * r.total.abs().max(1.0));
        assert_eq!(r.weights["distill"], 2.0);
        assert!(r.components["tmg"] > 0.0);
    }
}

#[test]
fn zero_eta_gives_exactly_zero_guidance_term() {
    let (mut model, data) = setup(4);
    Stage1Trainer::new(&mut model, s1_config()).unwrap();
    let mut s2 = Stage2Trainer::new(&mut model, s2_config(0.0)).unwrap();
    for _ in 0..2 {
        assert_eq!(s2.step(&mut model, &data).unwrap().components["tmg"], 0.0);
    }
}

#[test]
fn stage2_without_stage1_is_a_state_error() {
    let (mut model, _) = setup(1);
    assert!(matches!(Stage2Trainer::new(&mut model, s2_config(1.0)), Err(Error::State(_))));
}

#[test]
fn stage1_trains_adapters_and_modulation_only() {
    let (mut model, _) = setup(1);
    Stage1Trainer::new(&mut model, s1_config()).unwrap();
    let names = model.trainable_names();
    assert!(names.iter().any(|n| n.starts_with("lqfm.")));
    assert!(names.iter().any(|n| n.starts_with("lora.s1.vae.enc.")));
    assert!(names.iter().all(|n| is_stage1_trainable(n)));
    assert!(names.iter().all(|n| n.starts_with("lora.s1.") || n.starts_with("lqfm.")));
}

#[test]
fn invalid_stage_configs_are_rejected() {
    let (mut model, _) = setup(1);
    let bad = Stage1Config {
        weights: Stage1Weights {
            content: -1.0,
            ..Default::default()
        },
        ..s1_config()
    };
    assert!(matches!(Stage1Trainer::new(&mut model, bad), Err(Error::Config(_))));
    let bad = Stage1Config { lr: 0.0, ..s1_config() };
    assert!(matches!(Stage1Trainer::new(&mut model, bad), Err(Error::Config(_))));
    Stage1Trainer::new(&mut model, s1_config()).unwrap();
    assert!(matches!(Stage2Trainer::new(&mut model, s2_config(-0.5)), Err(Error::Config(_))));
}

#[test]
fn stage2_leaves_everything_but_cross_attention_adapters_untouched() {
    let (mut model, data) = setup(6);
    let mut s1 = Stage1Trainer::new(&mut model, s1_config()).unwrap();
    for _ in 0..2 {
        s1.step(&mut model, &data).unwrap();
    }
    let before = model.param_hash(is_stage2_adapter);
    let mut s2 = Stage2Trainer::new(&mut model, s2_config(1.0)).unwrap();
    assert_eq!(model.param_hash(is_stage2_adapter), before);
    let adapters_at_start = model.param_hash(|n| !is_stage2_adapter(n));
    for _ in 0..100 {
        s2.step(&mut model, &data).unwrap();
    }
    assert_eq!(model.param_hash(is_stage2_adapter), before);
    assert_ne!(model.param_hash(|n| !is_stage2_adapter(n)), adapters_at_start);
}

#[test]
fn non_finite_loss_reports_the_step() {
    let (mut model, mut data) = setup(2);
    let mut tr = Stage1Trainer::new(&mut model, s1_config()).unwrap();
    tr.step(&mut model, &data).unwrap();
    for s in &mut data {
        s.x_l.data_mut()[0] = f32::NAN;
    }
    match tr.step(&mut model, &data) {
        Err(Error::Numerical { step, .. }) => assert_eq!(step, 1),
        other => panic!("expected a numerical error, got {other:?}"),
    }
}

#[test]
fn perceptual_distance_properties() {
    let (model, data) = setup(2);
    let (a, b) = (&data[0].hq, &data[1].hq);
    assert_eq!(perceptual_distance(&model, a, a).unwrap(), 0.0);
    let ab = perceptual_distance(&model, a, b).unwrap();
    assert_eq!(ab, perceptual_distance(&model, b, a).unwrap());
    let bumped = ImagePlane::from_fn(64, 64, ColorSpace::Rgb, |c, y, x| {
        a.get(c, y, x) + if (y + x) % 3 == 0 { 0.05 } else { 0.0 }
    });
    assert!(perceptual_distance(&model, a, &bumped).unwrap() > 0.0);
    let small = ImagePlane::filled(32, 32, ColorSpace::Rgb, 0.5);
    assert!(matches!(perceptual_distance(&model, a, &small), Err(Error::Shape(_))));
}

#[test]
fn adversarial_gradients_reach_the_generator_only_through_fake() {
    let (_, data) = setup(4);
    let d = disc::init::<f32>(2);
    let mut g = Graph::new();
    let real = g.input(stack_images(&[&data[0].hq, &data[1].hq]).unwrap());
    let fake = g.input(stack_images(&[&data[2].x_l, &data[3].x_l]).unwrap());
    let (gen, dl) = adversarial_terms(&mut g, &d, real, fake);
    let zero = |t: Option<&osr_autodiff::Tensor<f32>>| t.map_or(true, |t| t.data().iter().all(|&v| v == 0.0));
    let gg = g.backward(gen);
    assert!(zero(gg.get(real)));
    assert!(!zero(gg.get(fake)));
    let gd = g.backward(dl);
    assert!(zero(gd.get(real)) && zero(gd.get(fake)));
}

#[test]
fn discriminator_cannot_separate_one_distribution() {
    let samples = generate(192, 41, &SceneConfig::default(), &DegradationParams::default()).unwrap();
    let imgs: Vec<&ImagePlane> = samples.iter().map(|s| &s.hq).collect();
    let (train_real, rest) = imgs.split_at(64);
    let (train_fake, rest) = rest.split_at(64);
    let (test_real, test_fake) = rest.split_at(32);
    let mut store = disc::init::<f32>(5);
    let mut opt = AdamW::new(AdamWConfig {
        lr: 2e-4,
        ..Default::default()
    });
    for step in 0..60 {
        let k = (step * 8) % 64;
        let mut g = Graph::new();
        let real = g.constant(stack_images(&train_real[k..k + 8]).unwrap());
        let fake = g.constant(stack_images(&train_fake[k..k + 8]).unwrap());
        let (_, dl) = adversarial_terms(&mut g, &store, real, fake);
        let grads = g.backward(dl);
        opt.step(&mut store, &g.param_grads(&grads));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for (set, is_real) in [(test_real, true), (test_fake, false)] {
        let mut g = Graph::new();
        let x = g.constant(stack_images(set).unwrap());
        let logits = disc::forward(&store, &mut g, x);
        for &v in g.value(logits).data() {
            correct += usize::from((v > 0.0) == is_real);
            total += 1;
        }
    }
    let acc = correct as f64 / total as f64;
    assert!((0.4..=0.6).contains(&acc), "held-out accuracy {acc}");
}

#[test]
fn loss_log_is_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    let reports = run_stage1(2);
    let mut log = TrainLog::append(&path).unwrap();
    for r in &reports {
        log.write(r).unwrap();
    }
    let text = std::fs::read_to_string(&path).unwrap();
    let back: Vec<LossReport> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back.len(), reports.len());
    for (b, r) in back.iter().zip(&reports) {
        assert_eq!((&b.phase, b.step), (&r.phase, r.step));
        assert_eq!(b.weights, r.weights);
        for (k, v) in &r.components {
            assert!((b.components[k] - v).abs() <= 1e-12 * v.abs().max(1.0));
        }
    }
}

#[test]
fn cosine_schedule_endpoints() {
    assert!((cosine_lr(1.0, 0, 100) - 1.0).abs() < 1e-12);
    assert!((cosine_lr(1.0, 100, 100) - 0.05).abs() < 1e-12);
    assert!(cosine_lr(1.0, 30, 100) > cosine_lr(1.0, 60, 100));
}
