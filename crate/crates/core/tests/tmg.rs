use osr_autodiff::gradcheck::max_relative_error;
use osr_autodiff::{Graph, Tensor};
use osr_core::dataset::{generate, DegradationParams, SceneConfig};
use osr_core::error::Error;
use osr_core::tmg::{
    aggregate_attention, aggregate_attention_graph, downsample_mask, filter_nouns, in_mask_fraction,
    positive_area_loss, positive_area_loss_value, validate_mask, AttnLayer, NounMaskSet, DEFAULT_MASK_THRESHOLD,
};
use osr_core::vocab::{token_id, Tag};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tagged(words: &[(&str, Tag)]) -> Vec<(String, Tag)> {
    words.iter().map(|(w, t)| (w.to_string(), *t)).collect()
}

#[test]
fn noun_filter_examples() {
    assert_eq!(
        filter_nouns(&tagged(&[("shiny", Tag::Adjective), ("circle", Tag::Noun)])),
        vec!["circle"]
    );
    assert!(filter_nouns(&tagged(&[("red", Tag::Adjective), ("big", Tag::Adjective)])).is_empty());
    assert_eq!(
        filter_nouns(&tagged(&[("circle", Tag::Noun), ("circle", Tag::Noun)])),
        vec!["circle"]
    );
}

#[test]
fn mask_validity_examples() {
    assert!(!validate_mask(&[false; 256], DEFAULT_MASK_THRESHOLD));
    assert!(validate_mask(&[true; 256], DEFAULT_MASK_THRESHOLD));
    let mut one = [false; 256];
    one[17] = true;
    assert!(!validate_mask(&one, DEFAULT_MASK_THRESHOLD));
    one[18] = true;
    assert!(validate_mask(&one, DEFAULT_MASK_THRESHOLD));
}

#[test]
fn mask_downsampling_binarises_coverage() {
    // 4×4 mask, factor 2: blocks with 4, 2, 1 and 0 active pixels
    let m = [
        true, true, true, false, //
        true, true, true, false, //
        true, false, false, false, //
        false, false, false, false,
    ];
    assert_eq!(downsample_mask(&m, 4, 4, 2).unwrap(), vec![true, true, false, false]);
    assert!(matches!(downsample_mask(&m, 4, 4, 3), Err(Error::Shape(_))));
}

#[test]
fn masks_from_dataset_samples() {
    let samples = generate(20, 4, &SceneConfig::default(), &DegradationParams::default()).unwrap();
    for s in &samples {
        let set = NounMaskSet::from_sample(s, 4, DEFAULT_MASK_THRESHOLD).unwrap();
        assert_eq!((set.height, set.width), (16, 16));
        assert_eq!(set.entries.len(), s.nouns.len());
        for (i, e) in set.entries.iter().enumerate() {
            assert_eq!(e.slot, i + 1);
            assert_eq!(e.token, token_id(&s.nouns[i]).unwrap());
            assert_eq!(e.valid, validate_mask(&e.mask, DEFAULT_MASK_THRESHOLD));
        }
    }
}

fn layer(h: usize, w: usize, tokens: usize, f: impl Fn(usize, usize) -> f64) -> AttnLayer {
    let mut data = Vec::with_capacity(h * w * tokens);
    for p in 0..h * w {
        for t in 0..tokens {
            data.push(f(p, t));
        }
    }
    AttnLayer {
        height: h,
        width: w,
        tokens,
        data,
    }
}

#[test]
fn uniform_attention_aggregates_to_constant() {
    let l = layer(4, 4, 4, |_, _| 0.25);
    let map = aggregate_attention(&[l], &[0, 3, 5, 0], 5, 4, 4).unwrap();
    assert!(map.iter().all(|&v| (v - 0.25).abs() < 1e-12));
}

#[test]
fn two_layers_average() {
    let p = layer(4, 4, 2, |p, t| (p * 2 + t) as f64 / 32.0);
    let q = layer(4, 4, 2, |p, t| ((p * 7 + t * 3) % 5) as f64 / 5.0);
    let map = aggregate_attention(&[p.clone(), q.clone()], &[0, 7], 7, 4, 4).unwrap();
    for (i, v) in map.iter().enumerate() {
        let expected = (p.data[i * 2 + 1] + q.data[i * 2 + 1]) / 2.0;
        assert!((v - expected).abs() < 1e-12);
    }
}

#[test]
fn half_resolution_hot_cell_upsamples_bilinearly() {
    let hot = layer(2, 2, 2, |p, t| if p == 0 && t == 1 { 1.0 } else { 0.0 });
    let map = aggregate_attention(&[hot], &[0, 2], 2, 4, 4).unwrap();
    // half-pixel-centre sampling, clamped at the border: source coordinate d/2 - 1/4
    let profile = [1.0, 0.75, 0.25, 0.0];
    for y in 0..4 {
        for x in 0..4 {
            assert!((map[y * 4 + x] - profile[y] * profile[x]).abs() <= 1e-6);
        }
    }
}

#[test]
fn aggregation_errors() {
    let l = layer(2, 2, 2, |_, _| 0.5);
    assert!(matches!(aggregate_attention(&[l], &[0, 1], 4, 2, 2), Err(Error::Lookup(_))));
    assert!(aggregate_attention(&[], &[0, 1], 1, 2, 2).is_err());
}

#[test]
fn graph_aggregation_matches_plain_aggregation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sizes = [(4usize, 4usize), (2, 2), (4, 4)];
    let layers: Vec<Tensor<f64>> = sizes
        .iter()
        .map(|&(h, w)| Tensor::from_fn(&[2, h * w, 3], |_| rng.random_range(0.0..1.0)))
        .collect();
    let mut g = Graph::new();
    let vars: Vec<_> = layers.iter().map(|t| g.constant(t.clone())).collect();
    let out = aggregate_attention_graph(&mut g, &vars, &sizes, 2, 4, 4);
    assert_eq!(g.shape(out), &[2, 16]);
    for n in 0..2 {
        let per: Vec<AttnLayer> = layers
            .iter()
            .zip(&sizes)
            .map(|(t, &(h, w))| AttnLayer::from_batch(t, h, w).remove(n))
            .collect();
        let plain = aggregate_attention(&per, &[0, 1, 6], 6, 4, 4).unwrap();
        for (a, b) in g.value(out).data()[n * 16..(n + 1) * 16].iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn positive_area_loss_examples() {
    let mask: Vec<bool> = (0..16).map(|i| i < 4).collect();
    let inside: Vec<f64> = (0..16).map(|i| if i < 4 { 0.25 } else { 0.0 }).collect();
    let outside: Vec<f64> = (0..16).map(|i| if i < 4 { 0.0 } else { 1.0 / 12.0 }).collect();
    let uniform = vec![1.0 / 16.0; 16];
    let v = |m: &Vec<f64>| positive_area_loss_value(&[m.clone()], &[mask.clone()], &[true]).unwrap();
    assert!(v(&inside).abs() < 1e-7);
    assert!((v(&outside) - 1.0).abs() < 1e-7);
    assert!((v(&uniform) - 0.75).abs() < 1e-7);
    // invalid rows are ignored
    let both = positive_area_loss_value(&[inside.clone(), outside.clone()], &[mask.clone(), mask.clone()], &[true, false]);
    assert!(both.unwrap().abs() < 1e-7);
}

#[test]
fn empty_valid_set_is_a_zero_no_op() {
    let mut g = Graph::<f64>::new();
    let att = g.input(Tensor::full(&[2, 4], 0.25));
    let l = positive_area_loss(&mut g, att, &[vec![true; 4], vec![false; 4]], &[false, false]);
    assert_eq!(g.value(l).item(), 0.0);
    let grads = g.backward(l);
    assert!(grads.get(att).map_or(true, |t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn positive_area_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let masks: Vec<Vec<bool>> = (0..3).map(|_| (0..16).map(|_| rng.random_bool(0.4)).collect()).collect();
    let att = Tensor::from_fn(&[3, 16], |_| rng.random_range(0.05..1.0));
    let err = max_relative_error(&att, 1e-6, 1e-6, |g, x| positive_area_loss(g, x, &masks, &[true, false, true]));
    assert!(err <= 1e-4, "relative error {err:e}");
}

fn mean_fraction(maps: &[Vec<f64>], masks: &[Vec<bool>]) -> f64 {
    maps.iter().zip(masks).map(|(m, k)| in_mask_fraction(m, k)).sum::<f64>() / maps.len() as f64
}

#[test]
fn gradient_step_raises_in_mask_fraction() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let masks: Vec<Vec<bool>> = (0..2)
            .map(|_| {
                let mut m: Vec<bool> = (0..16).map(|_| rng.random_bool(0.3)).collect();
                m[rng.random_range(0..8)] = true;
                m[rng.random_range(8..16)] = false;
                m
            })
            .collect();
        let att: Vec<f64> = (0..32).map(|_| rng.random_range(0.0..1.0)).collect();
        let before: Vec<Vec<f64>> = att.chunks(16).map(|c| c.to_vec()).collect();
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::from_vec(&[2, 16], att.clone()).unwrap());
        let l = positive_area_loss(&mut g, a, &masks, &[true, true]);
        let grad = g.backward(l).get(a).unwrap().clone();
        // step of 1e-2, then clamp at zero and renormalise each row
        let after: Vec<Vec<f64>> = att
            .iter()
            .zip(grad.data())
            .map(|(v, d)| (v - 1e-2 * d).max(0.0))
            .collect::<Vec<_>>()
            .chunks(16)
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(|v| v / s).collect()
            })
            .collect();
        assert!(mean_fraction(&after, &masks) > mean_fraction(&before, &masks));
    }
}

fn loss_case() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (prop::collection::vec(0.0f64..1.0, 16), prop::collection::vec(any::<bool>(), 16))
}

proptest! {
    #[test]
    fn loss_lies_in_unit_interval((map, mask) in loss_case()) {
        let l = positive_area_loss_value(&[map.clone()], &[mask.clone()], &[true]).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&l));
        let all_inside = map.iter().zip(&mask).all(|(&v, &m)| m || v == 0.0);
        if all_inside && map.iter().sum::<f64>() > 1e-3 {
            prop_assert!(l.abs() < 1e-6);
        }
    }

    #[test]
    fn noun_filter_is_idempotent(words in prop::collection::vec((0usize..10, 0usize..3), 0..12)) {
        let names = ["circle", "square", "red", "big", "dot", "a", "ring", "grid", "shiny", "and"];
        let tags = [Tag::Noun, Tag::Adjective, Tag::Other];
        let input: Vec<(String, Tag)> = words.iter().map(|&(w, t)| (names[w].to_string(), tags[t])).collect();
        let once = filter_nouns(&input);
        let again: Vec<(String, Tag)> = once.iter().map(|w| (w.clone(), Tag::Noun)).collect();
        prop_assert_eq!(filter_nouns(&again), once);
    }
}
