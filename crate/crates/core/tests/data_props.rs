use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segkit::data::{
    decode_pgm, decode_ppm, encode_pgm, encode_ppm, generate_dataset, generate_scene, hflip,
    pad_to_square, read_dataset, resize_max_side, write_dataset, DatasetMeta, RareClass, Sample,
    SceneConfig,
};
use segkit::metrics::class_frequencies;
use segkit::tensor::{softmax_cross_entropy_weighted, LabelMap, Shape, Tensor, VOID_LABEL};
use segkit::Error;

fn quantized_sample(h: usize, w: usize, classes: u8, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Tensor::from_fn(Shape::new(1, 3, h, w), |_, _, _, _| {
        rng.random_range(0..=255u8) as f64 / 255.0
    });
    let labels = LabelMap::new(
        h,
        w,
        (0..h * w).map(|_| rng.random_range(0..classes)).collect(),
    )
    .unwrap();
    Sample::new(image, labels).unwrap()
}

#[test]
fn rare_class_frequency_tracks_its_target() {
    let cfg = SceneConfig {
        classes: 3,
        rare: Some(RareClass {
            id: 2,
            target_freq: 0.005,
            size: 6,
        }),
        ..SceneConfig::default()
    };
    let data = generate_dataset(&cfg, 0, 10_000).unwrap();
    let f = class_frequencies(data.labels(), 3, VOID_LABEL).unwrap();
    assert!(
        (f[2] - 0.005).abs() <= 0.2 * 0.005,
        "rare frequency {}",
        f[2]
    );
}

#[test]
fn empty_scenes_are_all_background() {
    let cfg = SceneConfig {
        shapes_min: 0,
        shapes_max: 0,
        ..SceneConfig::default()
    };
    let s = generate_scene(&cfg, 3).unwrap();
    assert!(s.labels.data.iter().all(|&l| l == 0));
}

#[test]
fn generated_directories_are_byte_identical() {
    let cfg = SceneConfig {
        canvas: 24,
        ..SceneConfig::default()
    };
    let meta = DatasetMeta {
        classes: cfg.classes,
        count: 5,
        seed: cfg.seed,
        theta: 0.01,
        scene: cfg.clone(),
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        write_dataset(d.path(), &generate_dataset(&cfg, 0, 5).unwrap(), &meta).unwrap();
    }
    for rel in ["meta.json", "images/000004.ppm", "labels/000000.pgm"] {
        let a = std::fs::read(dirs[0].path().join(rel)).unwrap();
        let b = std::fs::read(dirs[1].path().join(rel)).unwrap();
        assert_eq!(a, b, "{rel}");
    }
    let (back, m) = read_dataset(dirs[0].path()).unwrap();
    assert_eq!(m, meta);
    assert_eq!(back.samples, generate_dataset(&cfg, 0, 5).unwrap().samples);
}

#[test]
fn malformed_rasters_report_offsets() {
    let bytes = encode_pgm(&LabelMap::filled(2, 2, 1));
    match decode_pgm(&bytes[..bytes.len() - 1]) {
        Err(Error::Format { .. }) => {}
        other => panic!("expected a format error, got {other:?}"),
    }
    assert!(matches!(
        decode_ppm(b"P5\n2 2\n255\n"),
        Err(Error::Format { offset: 0, .. })
    ));
}

proptest! {
    #[test]
    fn rasters_round_trip(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let s = quantized_sample(h, w, 7, seed);
        prop_assert_eq!(decode_ppm(&encode_ppm(&s.image).unwrap()).unwrap(), s.image);
        prop_assert_eq!(decode_pgm(&encode_pgm(&s.labels)).unwrap(), s.labels);
    }

    #[test]
    fn padding_does_not_change_the_loss(h in 1usize..6, w in 1usize..6, extra in 0usize..4, seed in any::<u64>()) {
        let s = quantized_sample(h, w, 3, seed);
        let size = h.max(w) + extra;
        let padded = pad_to_square(&s, size).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let big = Tensor::from_fn(Shape::new(1, 3, size, size), |_, _, _, _| rng.random_range(-2.0..2.0));
        let small = Tensor::from_fn(Shape::new(1, 3, h, w), |n, c, y, x| big.at(n, c, y, x));
        let weights = [1.0, 2.5, 7.0];
        let a = softmax_cross_entropy_weighted(&small, &[s.labels.clone()], &weights, VOID_LABEL).unwrap();
        let b = softmax_cross_entropy_weighted(&big, &[padded.labels.clone()], &weights, VOID_LABEL).unwrap();
        prop_assert!((a.loss - b.loss).abs() < 1e-12);
        prop_assert!(padded.labels.data.iter().enumerate()
            .all(|(i, &l)| (i / size < h && i % size < w) || l == VOID_LABEL));
    }

    #[test]
    fn flipping_keeps_frequencies(h in 1usize..8, w in 1usize..8, seed in any::<u64>()) {
        let s = quantized_sample(h, w, 4, seed);
        let f = hflip(&s);
        prop_assert_eq!(&hflip(&f), &s);
        prop_assert_eq!(
            class_frequencies([&s.labels], 4, VOID_LABEL).unwrap(),
            class_frequencies([&f.labels], 4, VOID_LABEL).unwrap()
        );
    }

    #[test]
    fn nearest_resize_never_invents_ids(h in 1usize..12, w in 1usize..12, side in 1usize..20, seed in any::<u64>()) {
        let s = quantized_sample(h, w, 6, seed);
        let r = resize_max_side(&s, side).unwrap();
        prop_assert_eq!(r.height().max(r.width()), side);
        let before: BTreeSet<u8> = s.labels.data.iter().copied().collect();
        prop_assert!(r.labels.data.iter().all(|l| before.contains(l)));
    }

    #[test]
    fn scenes_are_pure_functions_of_seed_and_index(seed in 0u64..1000, index in 0u64..1000) {
        let cfg = SceneConfig { canvas: 16, seed, ..SceneConfig::default() };
        prop_assert_eq!(generate_scene(&cfg, index).unwrap(), generate_scene(&cfg, index).unwrap());
    }
}

#[test]
fn forced_flip_mirrors_labels() {
    let s = Sample::new(
        Tensor::zeros(Shape::new(1, 3, 1, 2)),
        LabelMap::new(1, 2, vec![0, 1]).unwrap(),
    )
    .unwrap();
    assert_eq!(hflip(&s).labels.data, vec![1, 0]);
}
