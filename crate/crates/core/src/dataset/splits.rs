//! Role assignment and train/test partitioning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::canvas::{add_noise, compose_canvas, NoiseConfig};
use super::glyphs::render_glyph;
use super::idx::RawDigits;
use super::{ImageSample, Role};
use crate::error::{Error, Result};

/// Which digit is normal and which is the known anomaly; every other digit
/// is an unknown anomaly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitConfig {
    pub normal_digit: u8,
    pub known_anomaly_digit: u8,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            normal_digit: 0,
            known_anomaly_digit: 1,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.normal_digit > 9 || self.known_anomaly_digit > 9 {
            return Err(Error::InvalidArgument("split digits must be 0-9".into()));
        }
        if self.normal_digit == self.known_anomaly_digit {
            return Err(Error::InvalidArgument(format!(
                "normal and known-anomaly digit are both {}",
                self.normal_digit
            )));
        }
        Ok(())
    }

    pub fn role_of(&self, digit: u8) -> Role {
        if digit == self.normal_digit {
            Role::Normal
        } else if digit == self.known_anomaly_digit {
            Role::KnownAnomaly
        } else {
            Role::UnknownAnomaly
        }
    }
}

/// Requested split sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Counts {
    /// Normal images for VAE training.
    pub train_vae: usize,
    /// Normal images for regressor training.
    pub train_reg_normal: usize,
    /// Known-anomaly images for regressor training.
    pub train_reg_anomaly: usize,
    /// Test images per digit class (all ten digits).
    pub test_per_digit: usize,
}

impl Counts {
    /// Images needed of `digit` under `split`.
    pub fn needed(&self, split: &SplitConfig, digit: u8) -> usize {
        self.test_per_digit
            + match split.role_of(digit) {
                Role::Normal => self.train_vae + self.train_reg_normal,
                Role::KnownAnomaly => self.train_reg_anomaly,
                Role::UnknownAnomaly => 0,
            }
    }

    pub fn total(&self) -> usize {
        self.train_vae + self.train_reg_normal + self.train_reg_anomaly + 10 * self.test_per_digit
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train_vae: Vec<ImageSample>,
    pub train_reg: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

/// Where the 28×28 source digits come from.
#[derive(Clone, Debug)]
pub enum DigitSource {
    Synthetic,
    Raw(RawDigits),
}

const ID_STRIDE: u64 = 1_000_000;
const LAYOUT_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 16;
const SOURCE_STREAM: u64 = 32;

fn stream(seed: u64, base: u64, digit: u8) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(base + digit as u64);
    rng
}

/// Generates the noisy-digit benchmark and partitions it.
///
/// Each digit uses its own layout, noise and source streams, so image `k`
/// of digit `d` (id `d·10⁶ + k`) has the same digit, size and position under
/// any split or noise setting. Regenerating with [`NoiseConfig::clean`]
/// therefore yields the noise-free counterpart of the same images.
pub fn generate_benchmark(
    source: &DigitSource,
    split: &SplitConfig,
    counts: &Counts,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<Splits> {
    split.validate()?;
    let mut samples = Vec::with_capacity(counts.total());
    for digit in 0..10u8 {
        let need = counts.needed(split, digit);
        let mut source_rng = stream(seed, SOURCE_STREAM, digit);
        let raw: Vec<_> = match source {
            DigitSource::Synthetic => (0..need)
                .map(|_| render_glyph(digit, &mut source_rng))
                .collect(),
            DigitSource::Raw(raw) => {
                let mut pool = raw.indices_of(digit);
                if pool.len() < need {
                    return Err(Error::InsufficientSamples {
                        class: format!("source digit {digit}"),
                        needed: need,
                        available: pool.len(),
                    });
                }
                pool.shuffle(&mut source_rng);
                pool[..need].iter().map(|&i| raw.images[i].clone()).collect()
            }
        };
        let mut layout_rng = stream(seed, LAYOUT_STREAM, digit);
        let mut noise_rng = stream(seed, NOISE_STREAM, digit);
        for (k, glyph) in raw.iter().enumerate() {
            let canvas = compose_canvas(glyph, &mut layout_rng)?;
            samples.push(ImageSample {
                id: digit as u64 * ID_STRIDE + k as u64,
                digit,
                role: split.role_of(digit),
                pixels: add_noise(&canvas, noise, &mut noise_rng),
            });
        }
    }
    build_splits(samples, split, counts)
}

/// Assigns roles from `split` and partitions samples into disjoint sets.
///
/// Within each digit, samples are taken in ascending id order: the first
/// `test_per_digit` go to the test set, then normals fill `train_vae` and
/// `train_reg`, and known anomalies fill `train_reg`. Unknown-anomaly
/// digits only ever reach the test set.
pub fn build_splits(mut samples: Vec<ImageSample>, split: &SplitConfig, counts: &Counts) -> Result<Splits> {
    split.validate()?;
    samples.sort_by_key(|s| (s.digit, s.id));
    let mut out = Splits::default();
    for digit in 0..10u8 {
        let role = split.role_of(digit);
        let group: Vec<ImageSample> = samples
            .iter()
            .filter(|s| s.digit == digit)
            .cloned()
            .map(|mut s| {
                s.role = role;
                s
            })
            .collect();
        let need = counts.needed(split, digit);
        if group.len() < need {
            return Err(Error::InsufficientSamples {
                class: format!("digit {digit} ({role})"),
                needed: need,
                available: group.len(),
            });
        }
        let mut group = group.into_iter();
        let mut take = |n: usize, into: &mut Vec<ImageSample>| into.extend(group.by_ref().take(n));
        take(counts.test_per_digit, &mut out.test);
        match role {
            Role::Normal => {
                take(counts.train_vae, &mut out.train_vae);
                take(counts.train_reg_normal, &mut out.train_reg);
            }
            Role::KnownAnomaly => take(counts.train_reg_anomaly, &mut out.train_reg),
            Role::UnknownAnomaly => {}
        }
    }
    Ok(out)
}
