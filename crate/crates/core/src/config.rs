//! Line-oriented `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! errors. Lists are comma-separated.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::dataset::{Counts, NoiseConfig, SplitConfig};
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::regressor::{RegressionLoss, RegressorConfig, RegressorTrainConfig};
use crate::scoring::{CamNorm, ScoringConfig, Strategy};
use crate::vae::{VaeConfig, VaeTrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub split: SplitConfig,
    pub counts: Counts,
    pub noise: NoiseConfig,
    pub source: DataSource,
    pub vae_channels: Vec<usize>,
    pub latent_dim: usize,
    pub vae_epochs: usize,
    pub vae_lr: f64,
    pub vae_batch: usize,
    pub beta_rec: f64,
    pub reg_channels: Vec<usize>,
    pub reg_target_layer: Option<usize>,
    pub reg_epochs: usize,
    pub reg_lr: f64,
    pub reg_batch: usize,
    pub reg_loss: RegressionLoss,
    pub m_trials: usize,
    pub epsilon: f64,
    pub cam_norm: CamNorm,
    pub strategies: Vec<Strategy>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            split: SplitConfig::default(),
            counts: Counts {
                train_vae: 1000,
                train_reg_normal: 1000,
                train_reg_anomaly: 500,
                test_per_digit: 100,
            },
            noise: NoiseConfig::default(),
            source: DataSource::Synthetic,
            vae_channels: vec![8, 16, 32, 64],
            latent_dim: 128,
            vae_epochs: 15,
            vae_lr: 1e-3,
            vae_batch: 8,
            beta_rec: 1.0,
            reg_channels: vec![16, 32, 64],
            reg_target_layer: None,
            reg_epochs: 20,
            reg_lr: 1e-3,
            reg_batch: 32,
            reg_loss: RegressionLoss::Absolute,
            m_trials: 5,
            epsilon: 1e-8,
            cam_norm: CamNorm::L1,
            strategies: Strategy::ALL.to_vec(),
        }
    }
}

/// Independent sub-seeds for the stages of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Data,
    Vae,
    Regressor,
    Scoring,
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| format!("`{s}`: {e}")))
        .collect()
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        use rand::{RngCore, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1 + stage as u64);
        match stage {
            Stage::Data => self.seed,
            _ => rng.next_u64(),
        }
    }

    pub fn vae_arch(&self) -> VaeConfig {
        VaeConfig {
            image_hw: (crate::dataset::CANVAS, crate::dataset::CANVAS),
            channels: self.vae_channels.clone(),
            latent_dim: self.latent_dim,
        }
    }

    pub fn vae_train(&self) -> VaeTrainConfig {
        VaeTrainConfig {
            epochs: self.vae_epochs,
            batch_size: self.vae_batch,
            adam: AdamConfig {
                lr: self.vae_lr,
                ..AdamConfig::default()
            },
            beta_rec: self.beta_rec,
            seed: self.stage_seed(Stage::Vae),
        }
    }

    pub fn reg_arch(&self) -> RegressorConfig {
        RegressorConfig {
            image_hw: (crate::dataset::CANVAS, crate::dataset::CANVAS),
            channels: self.reg_channels.clone(),
            target_layer_index: self.reg_target_layer,
        }
    }

    pub fn reg_train(&self) -> RegressorTrainConfig {
        RegressorTrainConfig {
            epochs: self.reg_epochs,
            batch_size: self.reg_batch,
            adam: AdamConfig {
                lr: self.reg_lr,
                ..AdamConfig::default()
            },
            loss: self.reg_loss,
            seed: self.stage_seed(Stage::Regressor),
        }
    }

    pub fn scoring(&self) -> ScoringConfig {
        ScoringConfig {
            m_trials: self.m_trials,
            epsilon: self.epsilon,
            seed: self.stage_seed(Stage::Scoring),
            norm: self.cam_norm,
            cam_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        let c = &self.counts;
        if [c.train_vae, c.train_reg_normal, c.train_reg_anomaly, c.test_per_digit].contains(&0) {
            return Err(Error::InvalidArgument("all counts must be positive".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::InvalidArgument("strategy list is empty".into()));
        }
        if self.vae_channels.is_empty() || self.reg_channels.is_empty() {
            return Err(Error::InvalidArgument("channel lists must be nonempty".into()));
        }
        if self.noise.sigma_mean < 0.0 || self.noise.sigma_std < 0.0 {
            return Err(Error::InvalidArgument("noise parameters must be nonnegative".into()));
        }
        self.scoring().validate()
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
        }
        match key {
            "seed" => self.seed = num(value)?,
            "normal_digit" => self.split.normal_digit = num(value)?,
            "known_anomaly_digit" => self.split.known_anomaly_digit = num(value)?,
            "train_vae" => self.counts.train_vae = num(value)?,
            "train_reg_normal" => self.counts.train_reg_normal = num(value)?,
            "train_reg_anomaly" => self.counts.train_reg_anomaly = num(value)?,
            "test_per_digit" => self.counts.test_per_digit = num(value)?,
            "noise_sigma_mean" => self.noise.sigma_mean = num(value)?,
            "noise_sigma_std" => self.noise.sigma_std = num(value)?,
            "source" => {
                self.source = match value {
                    "synthetic" => DataSource::Synthetic,
                    "idx" => match &self.source {
                        DataSource::Idx { .. } => self.source.clone(),
                        DataSource::Synthetic => DataSource::Idx {
                            images: PathBuf::new(),
                            labels: PathBuf::new(),
                        },
                    },
                    other => return Err(format!("unknown source `{other}` (synthetic or idx)")),
                }
            }
            "idx_images" | "idx_labels" => {
                let (mut images, mut labels) = match &self.source {
                    DataSource::Idx { images, labels } => (images.clone(), labels.clone()),
                    DataSource::Synthetic => (PathBuf::new(), PathBuf::new()),
                };
                if key == "idx_images" {
                    images = value.into();
                } else {
                    labels = value.into();
                }
                self.source = DataSource::Idx { images, labels };
            }
            "vae_channels" => self.vae_channels = parse_list(value)?,
            "latent_dim" => self.latent_dim = num(value)?,
            "vae_epochs" => self.vae_epochs = num(value)?,
            "vae_lr" => self.vae_lr = num(value)?,
            "vae_batch" => self.vae_batch = num(value)?,
            "beta_rec" => self.beta_rec = num(value)?,
            "reg_channels" => self.reg_channels = parse_list(value)?,
            "reg_target_layer" => {
                self.reg_target_layer = match value {
                    "last" => None,
                    v => Some(num(v)?),
                }
            }
            "reg_epochs" => self.reg_epochs = num(value)?,
            "reg_lr" => self.reg_lr = num(value)?,
            "reg_batch" => self.reg_batch = num(value)?,
            "reg_loss" => self.reg_loss = value.parse().map_err(|e: Error| e.to_string())?,
            "m_trials" => self.m_trials = num(value)?,
            "epsilon" => self.epsilon = num(value)?,
            "cam_norm" => self.cam_norm = value.parse().map_err(|e: Error| e.to_string())?,
            "strategies" => self.strategies = parse_list(value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|message| Error::Config { line: i + 1, message })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Serialises every key; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k}={v}").expect("string write");
        kv("seed", self.seed.to_string());
        kv("normal_digit", self.split.normal_digit.to_string());
        kv("known_anomaly_digit", self.split.known_anomaly_digit.to_string());
        kv("train_vae", self.counts.train_vae.to_string());
        kv("train_reg_normal", self.counts.train_reg_normal.to_string());
        kv("train_reg_anomaly", self.counts.train_reg_anomaly.to_string());
        kv("test_per_digit", self.counts.test_per_digit.to_string());
        kv("noise_sigma_mean", self.noise.sigma_mean.to_string());
        kv("noise_sigma_std", self.noise.sigma_std.to_string());
        match &self.source {
            DataSource::Synthetic => kv("source", "synthetic".into()),
            DataSource::Idx { images, labels } => {
                kv("source", "idx".into());
                kv("idx_images", images.display().to_string());
                kv("idx_labels", labels.display().to_string());
            }
        }
        kv("vae_channels", join(&self.vae_channels));
        kv("latent_dim", self.latent_dim.to_string());
        kv("vae_epochs", self.vae_epochs.to_string());
        kv("vae_lr", self.vae_lr.to_string());
        kv("vae_batch", self.vae_batch.to_string());
        kv("beta_rec", self.beta_rec.to_string());
        kv("reg_channels", join(&self.reg_channels));
        kv(
            "reg_target_layer",
            self.reg_target_layer.map_or("last".into(), |t| t.to_string()),
        );
        kv("reg_epochs", self.reg_epochs.to_string());
        kv("reg_lr", self.reg_lr.to_string());
        kv("reg_batch", self.reg_batch.to_string());
        kv("reg_loss", self.reg_loss.to_string());
        kv("m_trials", self.m_trials.to_string());
        kv("epsilon", self.epsilon.to_string());
        kv("cam_norm", self.cam_norm.to_string());
        kv("strategies", join(&self.strategies));
        out
    }
}
