use osr_core::adaptive_noise::sobel_gradient;
use osr_core::adaptive_noise::to_grayscale;
use osr_core::dataset::{
    degrade, generate, generate_sample, read_array, read_dataset, synth_hq, write_array, write_dataset,
    DegradationParams, SceneConfig,
};
use osr_core::error::Error;
use osr_core::image::{ColorSpace, ImagePlane};
use osr_core::vocab::NOUNS;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn generation_is_deterministic() {
    let cfg = SceneConfig::default();
    let p = DegradationParams::default();
    let a = generate_sample(3, 17, &cfg, &p).unwrap();
    let b = generate_sample(3, 17, &cfg, &p).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, generate_sample(3, 18, &cfg, &p).unwrap());
    let s1 = synth_hq(&mut ChaCha8Rng::seed_from_u64(9), &cfg).unwrap();
    let s2 = synth_hq(&mut ChaCha8Rng::seed_from_u64(9), &cfg).unwrap();
    assert_eq!(s1, s2);
}

#[test]
fn degradation_is_deterministic() {
    let s = synth_hq(&mut ChaCha8Rng::seed_from_u64(4), &SceneConfig::default()).unwrap();
    let p = DegradationParams::default();
    let a = degrade(&s.hq, &p, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = degrade(&s.hq, &p, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.height(), a.width()), (16, 16));
}

#[test]
fn sample_structure() {
    let samples = generate(40, 5, &SceneConfig::default(), &DegradationParams::default()).unwrap();
    for s in &samples {
        assert_eq!((s.hq.height(), s.hq.width()), (64, 64));
        assert_eq!((s.lq.height(), s.lq.width()), (16, 16));
        assert!(!s.nouns.is_empty() && s.nouns.len() <= 3);
        assert_eq!(s.masks.len(), s.nouns.len());
        assert_eq!(s.texture.len(), 64 * 64);
        for (noun, mask) in s.nouns.iter().zip(&s.masks) {
            assert!(NOUNS.contains(&noun.as_str()));
            assert_eq!(mask.len(), 64 * 64);
            assert!(mask.iter().any(|&m| m));
            let in_prompt = s.prompt.iter().filter(|(w, _)| w == noun).count();
            assert_eq!(in_prompt, 1);
        }
        let mut sorted = s.nouns.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), s.nouns.len());
    }
}

#[test]
fn solid_shapes_are_painted_exactly_on_their_mask() {
    // every non-grid shape is painted in one colour over exactly its rasterized area
    let samples = generate(30, 6, &SceneConfig::default(), &DegradationParams::default()).unwrap();
    let mut checked = 0;
    for s in &samples {
        for (noun, mask) in s.nouns.iter().zip(&s.masks) {
            if noun == "grid" {
                continue;
            }
            let first = mask.iter().position(|&m| m).unwrap();
            let colour: Vec<f32> = (0..3).map(|c| s.hq.plane(c)[first]).collect();
            for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                for c in 0..3 {
                    assert_eq!(s.hq.plane(c)[i], colour[c]);
                }
            }
            checked += 1;
        }
    }
    assert!(checked > 20);
}

#[test]
fn zero_shape_config_gives_empty_annotations() {
    let cfg = SceneConfig {
        min_shapes: 0,
        max_shapes: 0,
        ..SceneConfig::default()
    };
    let s = generate_sample(1, 0, &cfg, &DegradationParams::default()).unwrap();
    assert!(s.nouns.is_empty() && s.masks.is_empty());
}

#[test]
fn checkerboard_box_average() {
    let hq = ImagePlane::from_fn(8, 8, ColorSpace::Rgb, |c, y, x| {
        let base = ((y / 2 + x) % 2) as f32;
        base * (0.5 + 0.25 * c as f32) + (y * 8 + x) as f32 / 256.0
    });
    let lq = degrade(&hq, &DegradationParams::identity(4), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!((lq.height(), lq.width()), (2, 2));
    for c in 0..3 {
        for by in 0..2 {
            for bx in 0..2 {
                let mut sum = 0.0f64;
                for y in by * 4..by * 4 + 4 {
                    for x in bx * 4..bx * 4 + 4 {
                        sum += hq.get(c, y, x) as f64;
                    }
                }
                assert!((lq.get(c, by, bx) as f64 - sum / 16.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn textured_pixels_are_sharper_than_flat_pixels() {
    let samples = generate(200, 8, &SceneConfig::default(), &DegradationParams::default()).unwrap();
    for s in &samples {
        let g = sobel_gradient(&to_grayscale(&s.hq).unwrap()).unwrap();
        let mean = |want: bool| {
            let v: Vec<f64> = g.values.iter().zip(&s.texture).filter(|(_, &t)| t == want).map(|(v, _)| *v).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(true) > mean(false), "sample {}", s.seed);
    }
}

#[test]
fn disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate(10, 2, &SceneConfig::default(), &DegradationParams::default()).unwrap();
    write_dataset(&samples, dir.path()).unwrap();
    assert!(dir.path().join("manifest.jsonl").exists());
    assert!(dir.path().join("hq/0000.bin").exists());
    assert!(dir.path().join("lq/0009.bin").exists());
    assert!(dir.path().join("masks/0000_0.bin").exists());
    assert_eq!(read_dataset(dir.path()).unwrap(), samples);

    let empty = tempfile::tempdir().unwrap();
    write_dataset(&[], empty.path()).unwrap();
    assert!(read_dataset(empty.path()).unwrap().is_empty());
}

#[test]
fn missing_file_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate(3, 2, &SceneConfig::default(), &DegradationParams::default()).unwrap();
    write_dataset(&samples, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("lq/0001.bin")).unwrap();
    match read_dataset(dir.path()) {
        Err(Error::Parse { index, msg }) => {
            assert_eq!(index, 1);
            assert!(msg.contains("0001.bin"), "{msg}");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
    let none = tempfile::tempdir().unwrap();
    assert!(matches!(read_dataset(none.path()), Err(Error::MissingFile(_))));
}

#[test]
fn corrupt_manifest_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate(2, 2, &SceneConfig::default(), &DegradationParams::default()).unwrap();
    write_dataset(&samples, dir.path()).unwrap();
    let path = dir.path().join("manifest.jsonl");
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{not json}\n");
    std::fs::write(&path, text).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Parse { index: 2, .. })));
}

#[test]
fn array_format_is_little_endian_with_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.bin");
    write_array(&path, &[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.5]).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"OSRA");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
    assert_eq!(f32::from_le_bytes(bytes[36..40].try_into().unwrap()), 5.5);
    assert_eq!(read_array(&path).unwrap(), (vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.5]));
}
