use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spader::dataset::{generate_benchmark, Counts, DigitSource, ImageSample, NoiseConfig, Role, SplitConfig};
use spader::params::Parameters;
use spader::vae::{
    kl_divergence, reparameterize, reparameterize_with, train_vae, VaeConfig, VaeParams, VaeTrainConfig,
};
use spader::Tensor;

fn tiny_arch() -> VaeConfig {
    VaeConfig {
        image_hw: (8, 8),
        channels: vec![2, 3, 3, 2],
        latent_dim: 4,
    }
}

fn random_image(hw: (usize, usize), rng: &mut impl Rng) -> Tensor {
    Tensor::new(vec![1, hw.0, hw.1], (0..hw.0 * hw.1).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

fn zeroed(mut p: VaeParams) -> VaeParams {
    for t in p.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    p
}

#[test]
fn zero_weights_encode_to_standard_posterior() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = zeroed(VaeParams::init(&tiny_arch(), &mut rng).unwrap());
    let (mu, logvar) = p.encode(&random_image((8, 8), &mut rng)).unwrap();
    assert!(mu.data().iter().chain(logvar.data()).all(|&v| v == 0.0));
    assert_eq!(mu.len(), 4);
    assert_eq!(logvar.len(), 4);
}

#[test]
fn encode_is_deterministic_and_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let p = VaeParams::init(&tiny_arch(), &mut rng).unwrap();
        let x = random_image((8, 8), &mut rng);
        let a = p.encode(&x).unwrap();
        let b = p.encode(&x).unwrap();
        assert_eq!(a, b);
        assert!(a.0.all_finite() && a.1.all_finite());
    }
}

#[test]
fn encode_rejects_wrong_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = VaeParams::init(&tiny_arch(), &mut rng).unwrap();
    assert!(p.encode(&Tensor::zeros(&[1, 8, 9])).is_err());
    assert!(p.decode(&Tensor::zeros(&[5])).is_err());
}

#[test]
fn reparameterize_examples() {
    let mu = Tensor::vector(vec![0.5, -1.0]);
    let logvar = Tensor::vector(vec![0.3, 2.0]);
    let z = reparameterize_with(&mu, &logvar, &Tensor::zeros(&[2])).unwrap();
    assert_eq!(z, mu);
    let eps = Tensor::vector(vec![0.7, -0.2]);
    let z = reparameterize_with(&Tensor::zeros(&[2]), &Tensor::zeros(&[2]), &eps).unwrap();
    assert_eq!(z, eps);
    assert!(reparameterize_with(&mu, &Tensor::zeros(&[3]), &eps).is_err());
}

#[test]
fn reparameterize_sample_mean_tracks_mu() {
    let mu = Tensor::vector(vec![0.5, -2.0, 3.0]);
    let logvar = Tensor::vector(vec![0.0, 1.0, -1.0]);
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut sums = [0.0; 3];
    for _ in 0..n {
        let z = reparameterize(&mu, &logvar, &mut rng).unwrap();
        for (s, v) in sums.iter_mut().zip(z.data()) {
            *s += v;
        }
    }
    for d in 0..3 {
        let sigma = (0.5 * logvar.data()[d]).exp();
        let mean = sums[d] / n as f64;
        assert!((mean - mu.data()[d]).abs() < 3.0 * sigma / (n as f64).sqrt(), "dim {d}: {mean}");
    }
}

#[test]
fn decode_shape_range_and_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let arch = VaeConfig {
        image_hw: (20, 12),
        channels: vec![2, 2, 2, 2],
        latent_dim: 6,
    };
    let p = VaeParams::init(&arch, &mut rng).unwrap();
    let z = Tensor::vector((0..6).map(|_| rng.gen_range(-3.0..3.0)).collect());
    let x = p.decode(&z).unwrap();
    assert_eq!(x.shape(), [1, 20, 12]);
    assert!(x.data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(x, p.decode(&z).unwrap());
}

#[test]
fn kl_examples() {
    let z = Tensor::zeros(&[3]);
    assert_eq!(kl_divergence(&z, &z).unwrap(), 0.0);
    let kl = kl_divergence(&Tensor::vector(vec![1.0]), &Tensor::vector(vec![0.0])).unwrap();
    assert!((kl - 0.5).abs() < 1e-15);
    assert!(kl_divergence(&z, &Tensor::zeros(&[2])).is_err());
}

/// KL(N(m, s²) || N(0, 1)) by Simpson quadrature of q·(log q − log p).
fn kl_quadrature(m: f64, s: f64) -> f64 {
    let (lo, hi) = (m - 12.0 * s, m + 12.0 * s);
    let n = 20_000;
    let step = (hi - lo) / n as f64;
    let log_q = |x: f64| -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let log_p = |x: f64| -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let f = |x: f64| log_q(x).exp() * (log_q(x) - log_p(x));
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        let x = lo + i as f64 * step;
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    acc * step / 3.0
}

#[test]
fn kl_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let d = rng.gen_range(1..5);
        let mu: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let logvar: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..1.5)).collect();
        let expected: f64 = mu.iter().zip(&logvar).map(|(&m, &lv)| kl_quadrature(m, (0.5 * lv).exp())).sum();
        let kl = kl_divergence(&Tensor::vector(mu), &Tensor::vector(logvar)).unwrap();
        assert!((kl - expected).abs() < 1e-3, "{kl} vs {expected}");
    }
}

#[test]
fn kl_is_nonnegative_and_zero_only_at_the_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let d = rng.gen_range(1..6);
        let mu = Tensor::vector((0..d).map(|_| rng.gen_range(-3.0..3.0)).collect());
        let lv = Tensor::vector((0..d).map(|_| rng.gen_range(-3.0..3.0)).collect());
        assert!(kl_divergence(&mu, &lv).unwrap() > 0.0);
    }
}

#[test]
fn elbo_vanishes_for_perfect_reconstruction_at_the_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut p = zeroed(VaeParams::init(&tiny_arch(), &mut rng).unwrap());
    let last = p.decoder.last_mut().unwrap();
    last.bias.data_mut()[0] = 0.4;
    // Zero weights: mu = logvar = 0 and the decoder emits sigmoid(0.4) everywhere.
    let x = Tensor::full(&[1, 8, 8], 1.0 / (1.0 + (-0.4f64).exp()));
    let loss = p.elbo_loss_with(&x, &Tensor::zeros(&[4]), 1.0).unwrap();
    assert!(loss.abs() < 1e-12, "{loss}");
}

#[test]
fn elbo_is_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let p = VaeParams::init(&tiny_arch(), &mut rng).unwrap();
        let x = random_image((8, 8), &mut rng);
        assert!(p.elbo_loss(&x, &mut rng, 1.0).unwrap() >= 0.0);
    }
}

#[test]
fn elbo_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = VaeParams::init(&tiny_arch(), &mut rng).unwrap();
    let x = random_image((8, 8), &mut rng);
    let eps = Tensor::vector((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let (_, grads) = p.elbo_loss_and_grads(&x, &eps, 1.0).unwrap();
    let h = 1e-5;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (t, name) in names.iter().enumerate() {
        for i in 0..grads[t].len() {
            let eval = |delta: f64| {
                let mut q = p.clone();
                q.tensors_mut()[t].data_mut()[i] += delta;
                q.elbo_loss_with(&x, &eps, 1.0).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            analytic.push(grads[t].data()[i]);
            numeric.push(fd);
        }
        assert_eq!(grads[t].shape(), p.named_tensors()[t].1.shape(), "{name}");
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(diff / scale < 1e-5, "relative error {:e}", diff / scale);
}

fn normals(n: usize, seed: u64) -> (Vec<ImageSample>, Vec<ImageSample>) {
    let counts = Counts {
        train_vae: n,
        train_reg_normal: 1,
        train_reg_anomaly: 1,
        test_per_digit: 20,
    };
    let splits = generate_benchmark(
        &DigitSource::Synthetic,
        &SplitConfig::default(),
        &counts,
        &NoiseConfig::default(),
        seed,
    )
    .unwrap();
    (splits.train_vae, splits.test)
}

fn small_arch() -> VaeConfig {
    VaeConfig {
        image_hw: (84, 84),
        channels: vec![4, 8, 16, 16],
        latent_dim: 16,
    }
}

#[test]
fn training_reduces_loss_and_separates_normal_reconstructions() {
    let (train, test) = normals(200, 10);
    let config = VaeTrainConfig {
        epochs: 20,
        batch_size: 8,
        ..VaeTrainConfig::default()
    };
    let out = train_vae(&train, &small_arch(), &config).unwrap();
    let h = &out.loss_history;
    assert_eq!(h.len(), 20);
    assert!(h[19] < 0.7 * h[0], "loss history {h:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mean_err = |role: Role| {
        let picked: Vec<&ImageSample> = test.iter().filter(|s| s.role == role).collect();
        let total: f64 = picked
            .iter()
            .map(|s| {
                let r = out.params.reconstruct(&s.pixels, &mut rng).unwrap();
                r.data().iter().zip(s.pixels.data()).map(|(a, b)| (a - b).abs()).sum::<f64>()
            })
            .sum();
        total / picked.len() as f64
    };
    let normal = mean_err(Role::Normal);
    let unknown = mean_err(Role::UnknownAnomaly);
    assert!(normal < unknown, "normal {normal} vs unknown {unknown}");
}

#[test]
fn training_is_bit_reproducible() {
    let (train, _) = normals(16, 12);
    let config = VaeTrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 99,
        ..VaeTrainConfig::default()
    };
    let a = train_vae(&train, &small_arch(), &config).unwrap();
    let b = train_vae(&train, &small_arch(), &config).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.loss_history, b.loss_history);
}

#[test]
fn training_rejects_non_normal_or_empty_sets() {
    let (mut train, test) = normals(4, 13);
    let config = VaeTrainConfig {
        epochs: 1,
        ..VaeTrainConfig::default()
    };
    assert!(train_vae(&[], &small_arch(), &config).is_err());
    train.push(test.iter().find(|s| s.role == Role::KnownAnomaly).unwrap().clone());
    assert!(train_vae(&train, &small_arch(), &config).is_err());
}

#[test]
fn reconstruction_is_stochastic_and_shape_preserving() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let p = VaeParams::init(&tiny_arch(), &mut rng).unwrap();
    let x = random_image((8, 8), &mut rng);
    let a = p.reconstruct(&x, &mut rng).unwrap();
    let b = p.reconstruct(&x, &mut rng).unwrap();
    assert_eq!(a.shape(), x.shape());
    assert_ne!(a, b);
    let (r, latent) = p.reconstruct_with_latent(&x, &mut rng).unwrap();
    assert_eq!(r, p.decode(&latent.z).unwrap());
}
