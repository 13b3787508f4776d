use osr_autodiff::Tensor;
use osr_core::error::Error;
use osr_core::schedule::{forward_diffuse, recover_residual, reverse_recover, NoiseSchedule, TimestepRange};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Schedule with `ᾱ_1 = a`, followed by a tail so `T = 3`.
fn with_alpha(a: f64, lambda_max: f64) -> NoiseSchedule {
    NoiseSchedule::from_alpha_bar(vec![1.0, a, a * 0.5, a * 0.25], lambda_max).unwrap()
}

fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.data().iter().map(|y| y * y).sum();
    (num / den.max(1e-300)).sqrt()
}

#[test]
fn noise_coeff_examples() {
    let s = NoiseSchedule::default();
    assert_eq!(s.noise_coeff(0).unwrap(), 0.0);
    assert!((with_alpha(0.5, 100.0).noise_coeff(1).unwrap() - 1.0).abs() < 1e-15);
    assert!((with_alpha(0.8, 100.0).noise_coeff(1).unwrap() - 0.5).abs() < 1e-15);
    assert!(matches!(s.noise_coeff(1001), Err(Error::Range { .. })));
}

#[test]
fn mod_coeff_examples() {
    assert!((with_alpha(0.5, 100.0).mod_coeff(1).unwrap() - 1.0).abs() < 1e-12);
    assert!((with_alpha(0.8, 100.0).mod_coeff(1).unwrap() - 2.0).abs() < 1e-12);
    assert_eq!(with_alpha(0.999999, 100.0).mod_coeff(1).unwrap(), 100.0);
    assert!(matches!(NoiseSchedule::default().mod_coeff(0), Err(Error::Domain(_))));
}

#[test]
fn forward_diffuse_examples() {
    let s = with_alpha(0.5, 100.0);
    let ones = Tensor::<f64>::full(&[2, 3], 1.0);
    let z = forward_diffuse(&ones, &ones, &s, 1).unwrap();
    assert!(z.data().iter().all(|&v| (v - 2.0 * 0.5f64.sqrt()).abs() < 1e-12));
    let eps = Tensor::from_fn(&[2, 3], |i| i as f64);
    assert_eq!(forward_diffuse(&ones, &eps, &s, 0).unwrap(), ones);
    let zero = Tensor::zeros(&[2, 3]);
    let z = forward_diffuse(&ones, &zero, &s, 2).unwrap();
    assert!(z.data().iter().all(|&v| (v - 0.25f64.sqrt()).abs() < 1e-12));
    assert!(matches!(forward_diffuse(&ones, &Tensor::zeros(&[3, 2]), &s, 1), Err(Error::Shape(_))));
}

#[test]
fn reverse_recover_examples() {
    let s = with_alpha(0.5, 100.0);
    let z = reverse_recover(&Tensor::<f64>::zeros(&[4]), &Tensor::full(&[4], 1.0), &s, 1).unwrap();
    assert!(z.data().iter().all(|&v| (v + 1.0).abs() < 1e-12));
    let zt = Tensor::from_fn(&[4], |i| i as f64);
    assert_eq!(reverse_recover(&zt, &Tensor::full(&[4], 9.0), &s, 0).unwrap(), zt);
    assert!(matches!(reverse_recover(&zt, &Tensor::zeros(&[5]), &s, 1), Err(Error::Shape(_))));
}

#[test]
fn timestep_sampling() {
    let s = NoiseSchedule::default();
    let single = TimestepRange::new(100, 100, &s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!((0..100).all(|_| single.sample(&mut rng) == 100));

    let r = TimestepRange::new(1, 400, &s).unwrap();
    let n = 10_000;
    let draws: Vec<usize> = (0..n).map(|_| r.sample(&mut rng)).collect();
    assert!(draws.iter().all(|&t| (1..=400).contains(&t)));
    let mean = draws.iter().sum::<usize>() as f64 / n as f64;
    let sd = ((400.0f64 * 400.0 - 1.0) / 12.0).sqrt() / (n as f64).sqrt();
    assert!((mean - 200.5).abs() < 3.0 * sd, "mean {mean}");

    let seq = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..50).map(|_| r.sample(&mut rng)).collect::<Vec<_>>()
    };
    assert_eq!(seq(7), seq(7));
    assert!(matches!(TimestepRange::new(0, 10, &s), Err(Error::Config(_))));
    assert!(matches!(TimestepRange::new(10, 1001, &s), Err(Error::Config(_))));
    assert!(matches!(TimestepRange::new(20, 10, &s), Err(Error::Config(_))));
}

#[test]
fn default_schedule_invariants() {
    let s = NoiseSchedule::default();
    assert_eq!(s.steps(), 1000);
    assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    for t in 1..=s.steps() {
        let (prev, cur) = (s.alpha_bar(t - 1).unwrap(), s.alpha_bar(t).unwrap());
        assert!(cur < prev && cur > 0.0);
        assert!(s.noise_coeff(t).unwrap() > s.noise_coeff(t - 1).unwrap());
    }
    for t in 2..=s.steps() {
        let (l0, l1) = (s.mod_coeff(t - 1).unwrap(), s.mod_coeff(t).unwrap());
        if l0 < s.lambda_max() {
            assert!(l1 < l0);
        }
    }
}

#[test]
fn coefficient_duality() {
    let s = NoiseSchedule::default();
    for t in 1..=s.steps() {
        let w = s.noise_coeff(t).unwrap();
        if 1.0 / w <= s.lambda_max() {
            assert!((w * s.mod_coeff(t).unwrap() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn schedule_text_round_trip() {
    let s = NoiseSchedule::default();
    assert_eq!(NoiseSchedule::from_text(&s.to_text()).unwrap(), s);
    let table = with_alpha(0.7, 20.0);
    let back = NoiseSchedule::from_text(&table.to_text()).unwrap();
    for t in 0..=3 {
        assert_eq!(back.alpha_bar(t).unwrap(), table.alpha_bar(t).unwrap());
    }
    assert!(matches!(NoiseSchedule::from_text("kind=magic"), Err(Error::Format(_))));
}

#[test]
fn invalid_tables_are_rejected() {
    assert!(NoiseSchedule::from_alpha_bar(vec![0.9, 0.5], 10.0).is_err());
    assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.5, 0.6], 10.0).is_err());
    assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.5, 0.0], 10.0).is_err());
    assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.5], 0.0).is_err());
}

fn latent_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..64).prop_flat_map(|n| {
        (
            prop::collection::vec(-3.0f64..3.0, n),
            prop::collection::vec(-3.0f64..3.0, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn round_trip_recovers_the_latent((z, e) in latent_pair(), t in 1usize..=1000) {
        let s = NoiseSchedule::default();
        let n = z.len();
        let z = Tensor::from_vec(&[n], z).unwrap();
        let e = Tensor::from_vec(&[n], e).unwrap();
        let zt = forward_diffuse(&z, &e, &s, t).unwrap();
        let back = reverse_recover(&zt, &e, &s, t).unwrap();
        prop_assert!(rel_err(&back, &z) <= 1e-6);
    }

    #[test]
    fn direct_and_residual_forms_agree(
        (z, e) in latent_pair(),
        seed in any::<u64>(),
        t in 1usize..=1000,
    ) {
        let s = NoiseSchedule::default();
        let n = z.len();
        let z = Tensor::from_vec(&[n], z).unwrap();
        let e = Tensor::from_vec(&[n], e).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = Tensor::from_fn(&[n], |_| rand::Rng::random_range(&mut rng, -3.0..3.0));
        let zt = forward_diffuse(&z, &e, &s, t).unwrap();
        let direct = reverse_recover(&zt, &pred, &s, t).unwrap();
        let residual = recover_residual(&z, &e, &pred, &s, t).unwrap();
        prop_assert!(rel_err(&direct, &residual) <= 1e-6);
    }
}
