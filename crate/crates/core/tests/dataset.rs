use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spader::dataset::store::{read_dataset, write_dataset, MANIFEST};
use spader::dataset::{
    add_noise_with_sigma, build_splits, compose_canvas, compose_canvas_at, generate_benchmark, parse_idx,
    synth_glyphs, Counts, DigitSource, ImageSample, NoiseConfig, RawDigits, Role, SplitConfig, CANVAS,
};
use spader::error::Error;
use spader::Tensor;

fn idx_images(count: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 3];
    for v in [count, 28, 28] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 1];
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

#[test]
fn idx_single_black_image() {
    let raw = parse_idx(&idx_images(1, &[0; 784]), &idx_labels(&[4])).unwrap();
    assert_eq!(raw.len(), 1);
    assert_eq!(raw.labels, [4]);
    assert_eq!(raw.images[0].shape(), [1, 28, 28]);
    assert!(raw.images[0].data().iter().all(|&v| v == 0.0));
}

#[test]
fn idx_bytes_map_to_unit_range() {
    let mut px = vec![0u8; 784];
    px[0] = 255;
    px[1] = 51;
    let raw = parse_idx(&idx_images(1, &px), &idx_labels(&[0])).unwrap();
    assert_eq!(raw.images[0].data()[0], 1.0);
    assert!((raw.images[0].data()[1] - 0.2).abs() < 1e-15);
}

#[test]
fn idx_wrong_magic_names_the_observed_value() {
    let mut bytes = idx_images(1, &[0; 784]);
    bytes[3] = 1;
    match parse_idx(&bytes, &idx_labels(&[0])) {
        Err(e @ Error::BadMagic { found: 0x801, .. }) => assert!(e.to_string().contains("0x00000801")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn idx_truncation_and_count_mismatch() {
    match parse_idx(&idx_images(2, &[0; 784]), &idx_labels(&[0, 1])) {
        Err(Error::Truncated { expected, actual }) => {
            assert_eq!(expected, 16 + 2 * 784);
            assert_eq!(actual, 16 + 784);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(parse_idx(&idx_images(1, &[0; 784]), &idx_labels(&[0, 1])).is_err());
}

#[test]
fn idx_files_round_trip_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
    std::fs::write(&ip, idx_images(1, &[7; 784])).unwrap();
    std::fs::write(&lp, idx_labels(&[9])).unwrap();
    assert_eq!(RawDigits::read_files(&ip, &lp).unwrap().labels, [9]);
    let missing = RawDigits::read_files(&dir.path().join("nope"), &lp).unwrap_err();
    assert!(missing.to_string().contains("nope"));
}

#[test]
fn canvas_scale_three_fills_exactly() {
    let ones = Tensor::full(&[1, 28, 28], 1.0);
    let c = compose_canvas_at(&ones, 3.0, (0, 0)).unwrap();
    assert_eq!(c.shape(), [1, CANVAS, CANVAS]);
    assert!(c.data().iter().all(|&v| v == 1.0));
}

#[test]
fn digit_centres_cover_every_quadrant() {
    let ones = Tensor::full(&[1, 28, 28], 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut quadrants = [0usize; 4];
    for _ in 0..10_000 {
        let c = compose_canvas(&ones, &mut rng).unwrap();
        let lit: Vec<usize> = (0..CANVAS * CANVAS).filter(|&i| c.data()[i] > 0.0).collect();
        let (rows, cols): (Vec<usize>, Vec<usize>) = lit.iter().map(|i| (i / CANVAS, i % CANVAS)).unzip();
        let cy = (rows.iter().min().unwrap() + rows.iter().max().unwrap()) as f64 / 2.0;
        let cx = (cols.iter().min().unwrap() + cols.iter().max().unwrap()) as f64 / 2.0;
        let half = (CANVAS as f64 - 1.0) / 2.0;
        quadrants[(cy > half) as usize * 2 + (cx > half) as usize] += 1;
        let side = rows.iter().max().unwrap() - rows.iter().min().unwrap() + 1;
        assert!((28..=70).contains(&side), "side {side}");
    }
    assert!(quadrants.iter().all(|&q| q > 1500), "{quadrants:?}");
}

#[test]
fn noise_level_matches_sigma() {
    let gray = Tensor::full(&[1, CANVAS, CANVAS], 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sigma = 40.0 / 255.0;
    let noisy = add_noise_with_sigma(&gray, sigma, &mut rng);
    // At σ = 40/255 clipping at 0 or 1 is a > 3σ event, so it barely matters.
    let diffs: Vec<f64> = noisy.data().iter().map(|v| v - 0.5).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((std / sigma - 1.0).abs() < 0.05, "std {std} vs {sigma}");
    assert!(noisy.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn noise_sigma_is_clamped_at_zero() {
    let cfg = NoiseConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draws: Vec<f64> = (0..10_000).map(|_| cfg.draw_sigma(&mut rng)).collect();
    assert!(draws.iter().all(|&s| s >= 0.0));
    let zeros = draws.iter().filter(|&&s| s == 0.0).count() as f64 / draws.len() as f64;
    // P(N(40, 30²) < 0) = Φ(-4/3) ≈ 0.091.
    assert!((zeros - 0.091).abs() < 0.015, "{zeros}");
    assert_eq!(NoiseConfig::clean().draw_sigma(&mut rng), 0.0);
}

#[test]
fn glyphs_are_reproducible_and_in_range() {
    let a = synth_glyphs(&mut ChaCha8Rng::seed_from_u64(3), 5);
    let b = synth_glyphs(&mut ChaCha8Rng::seed_from_u64(3), 5);
    assert_eq!(a, b);
    assert_eq!(a.len(), 50);
    assert!(a.images.iter().all(|t| t.data().iter().all(|v| (0.0..=1.0).contains(v))));
}

#[test]
fn glyph_classes_are_separable_by_nearest_centroid() {
    let train = synth_glyphs(&mut ChaCha8Rng::seed_from_u64(4), 100);
    let test = synth_glyphs(&mut ChaCha8Rng::seed_from_u64(5), 100);
    let mut centroids = vec![vec![0.0; 784]; 10];
    for (img, &label) in train.images.iter().zip(&train.labels) {
        for (c, v) in centroids[label as usize].iter_mut().zip(img.data()) {
            *c += v / 100.0;
        }
    }
    let correct = test
        .images
        .iter()
        .zip(&test.labels)
        .filter(|(img, &label)| {
            let dist = |c: &Vec<f64>| c.iter().zip(img.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..10).min_by(|&i, &j| dist(&centroids[i]).total_cmp(&dist(&centroids[j]))).unwrap();
            best == label as usize
        })
        .count();
    let accuracy = correct as f64 / test.len() as f64;
    assert!(accuracy > 0.95, "accuracy {accuracy}");
}

fn small_counts() -> Counts {
    Counts {
        train_vae: 6,
        train_reg_normal: 4,
        train_reg_anomaly: 3,
        test_per_digit: 2,
    }
}

#[test]
fn roles_partition_digits() {
    let split = SplitConfig {
        normal_digit: 0,
        known_anomaly_digit: 1,
    };
    assert_eq!(split.role_of(0), Role::Normal);
    assert_eq!(split.role_of(1), Role::KnownAnomaly);
    for d in 2..10 {
        assert_eq!(split.role_of(d), Role::UnknownAnomaly);
    }
    for normal in 0..10u8 {
        for known in [1u8, 3, 5, 7, 9] {
            let s = SplitConfig {
                normal_digit: normal,
                known_anomaly_digit: known,
            };
            if normal == known {
                assert!(s.validate().is_err());
                continue;
            }
            let roles: Vec<Role> = (0..10).map(|d| s.role_of(d)).collect();
            assert_eq!(roles.iter().filter(|&&r| r == Role::Normal).count(), 1);
            assert_eq!(roles.iter().filter(|&&r| r == Role::KnownAnomaly).count(), 1);
        }
    }
}

#[test]
fn benchmark_splits_honour_the_contract() {
    let split = SplitConfig {
        normal_digit: 0,
        known_anomaly_digit: 5,
    };
    let s = generate_benchmark(&DigitSource::Synthetic, &split, &small_counts(), &NoiseConfig::default(), 6).unwrap();
    assert_eq!(s.train_vae.len(), 6);
    assert_eq!(s.train_reg.len(), 7);
    assert_eq!(s.test.len(), 20);
    assert!(s.train_vae.iter().all(|x| x.role == Role::Normal && x.digit == 0));
    assert!(s.train_reg.iter().all(|x| x.role != Role::UnknownAnomaly));
    assert!(s.train_reg.iter().any(|x| x.role == Role::KnownAnomaly && x.digit == 5));
    let test_digits: HashSet<u8> = s.test.iter().map(|x| x.digit).collect();
    assert_eq!(test_digits.len(), 10);
    let ids: Vec<u64> = s.train_vae.iter().chain(&s.train_reg).chain(&s.test).map(|x| x.id).collect();
    assert_eq!(ids.iter().collect::<HashSet<_>>().len(), ids.len());
    for x in s.train_vae.iter().chain(&s.train_reg).chain(&s.test) {
        assert_eq!(x.role, split.role_of(x.digit));
        assert_eq!(x.pixels.shape(), [1, 84, 84]);
        assert!(x.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn benchmark_generation_is_pure() {
    let gen = |seed| {
        generate_benchmark(&DigitSource::Synthetic, &SplitConfig::default(), &small_counts(), &NoiseConfig::default(), seed)
            .unwrap()
    };
    assert_eq!(gen(7), gen(7));
    assert_ne!(gen(7).test[0].pixels, gen(8).test[0].pixels);
}

#[test]
fn clean_regeneration_keeps_layout() {
    let gen = |noise| generate_benchmark(&DigitSource::Synthetic, &SplitConfig::default(), &small_counts(), &noise, 9).unwrap();
    let noisy = gen(NoiseConfig::default());
    let clean = gen(NoiseConfig::clean());
    for (n, c) in noisy.test.iter().zip(&clean.test) {
        assert_eq!((n.id, n.digit, n.role), (c.id, c.digit, c.role));
        // The clean digit shows through: bright clean pixels stay bright on average.
        let on: Vec<f64> = (0..c.pixels.len())
            .filter(|&i| c.pixels.data()[i] > 0.9)
            .map(|i| n.pixels.data()[i])
            .collect();
        assert!(on.iter().sum::<f64>() / on.len() as f64 > 0.7);
    }
}

#[test]
fn insufficient_source_images_report_the_shortfall() {
    let raw = synth_glyphs(&mut ChaCha8Rng::seed_from_u64(10), 3);
    let err = generate_benchmark(
        &DigitSource::Raw(raw),
        &SplitConfig::default(),
        &small_counts(),
        &NoiseConfig::default(),
        0,
    )
    .unwrap_err();
    match err {
        Error::InsufficientSamples { needed, available, .. } => assert!(needed > available),
        other => panic!("unexpected {other:?}"),
    }
    let few: Vec<ImageSample> = (0..5)
        .map(|i| ImageSample {
            id: i,
            digit: 0,
            role: Role::Normal,
            pixels: Tensor::zeros(&[1, 2, 2]),
        })
        .collect();
    let msg = build_splits(few, &SplitConfig::default(), &small_counts()).unwrap_err().to_string();
    assert!(msg.contains("digit 0") && msg.contains("short by"), "{msg}");
}

#[test]
fn idx_source_builds_the_same_contract() {
    let glyphs = synth_glyphs(&mut ChaCha8Rng::seed_from_u64(11), 20);
    let s = generate_benchmark(&DigitSource::Raw(glyphs), &SplitConfig::default(), &small_counts(), &NoiseConfig::default(), 12)
        .unwrap();
    assert_eq!(s.train_vae.len() + s.train_reg.len() + s.test.len(), small_counts().total());
}

#[test]
fn dataset_directory_round_trips() {
    let split = SplitConfig::default();
    let s = generate_benchmark(&DigitSource::Synthetic, &split, &small_counts(), &NoiseConfig::default(), 13).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &s, &split).unwrap();
    let (meta, back) = read_dataset(dir.path()).unwrap();
    assert_eq!(meta.split, split);
    assert_eq!((meta.height, meta.width), (84, 84));
    assert_eq!(back, s);
    let manifest = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
    assert_eq!(manifest.lines().count() - 1, small_counts().total());

    let again = tempfile::tempdir().unwrap();
    write_dataset(again.path(), &s, &split).unwrap();
    for name in ["manifest.csv", "dataset.cfg", "train_vae.f64", "train_reg.f64", "test.f64"] {
        assert_eq!(std::fs::read(dir.path().join(name)).unwrap(), std::fs::read(again.path().join(name)).unwrap());
    }
}

#[test]
fn corrupt_manifest_is_rejected() {
    let split = SplitConfig::default();
    let s = generate_benchmark(&DigitSource::Synthetic, &split, &small_counts(), &NoiseConfig::default(), 14).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &s, &split).unwrap();
    let path = dir.path().join(MANIFEST);
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replacen("NORMAL", "NORMALISH", 1)).unwrap();
    assert!(read_dataset(dir.path()).is_err());
    std::fs::write(&path, "garbage\n").unwrap();
    assert!(read_dataset(dir.path()).is_err());
}
