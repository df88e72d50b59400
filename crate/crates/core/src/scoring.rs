//! Anomaly scores built from VAE reconstructions, Grad-CAM weighting and the
//! normalness regressor. Higher scores mean "more normal".

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use crate::gradcam::{
    cam_positive, cam_signed, cam_weights, combine_maps, recon_cam, upsample_bilinear, CamMap,
    CamSource,
};
use crate::regressor::RegressorParams;
use crate::tensor::Tensor;
use crate::vae::VaeParams;

/// The seven scoring strategies, in reporting order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Vae,
    NaiveVaeGradcam,
    SpadeNoNorm,
    Spade,
    CnnReg,
    VaeCnnReg,
    Spader,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Vae,
        Strategy::NaiveVaeGradcam,
        Strategy::SpadeNoNorm,
        Strategy::Spade,
        Strategy::CnnReg,
        Strategy::VaeCnnReg,
        Strategy::Spader,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Vae => "VAE",
            Strategy::NaiveVaeGradcam => "NAIVE_VAE_GRADCAM",
            Strategy::SpadeNoNorm => "SPADE_NO_NORM",
            Strategy::Spade => "SPADE",
            Strategy::CnnReg => "CNN_REG",
            Strategy::VaeCnnReg => "VAE_CNN_REG",
            Strategy::Spader => "SPADER",
        }
    }

    pub fn uses_vae(self) -> bool {
        self != Strategy::CnnReg
    }

    pub fn uses_regressor(self) -> bool {
        self != Strategy::Vae
    }

    /// Whether the reconstruction-branch CAM is needed per trial.
    fn uses_combined_cam(self) -> bool {
        matches!(self, Strategy::SpadeNoNorm | Strategy::Spade | Strategy::Spader)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy `{s}`")))
    }
}

/// Norm used to normalise the combined CAM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CamNorm {
    #[default]
    L1,
    L2,
}

impl FromStr for CamNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l1" => Ok(CamNorm::L1),
            "l2" => Ok(CamNorm::L2),
            other => Err(Error::InvalidArgument(format!("unknown cam norm `{other}`"))),
        }
    }
}

impl fmt::Display for CamNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CamNorm::L1 => "l1",
            CamNorm::L2 => "l2",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoringConfig {
    /// Reconstructions per image.
    pub m_trials: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub norm: CamNorm,
    /// Multiplies every CAM before use. Test hook; 1 in normal operation.
    pub cam_scale: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            m_trials: 5,
            epsilon: 1e-8,
            seed: 0,
            norm: CamNorm::L1,
            cam_scale: 1.0,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_trials == 0 {
            return Err(Error::InvalidArgument("m_trials must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        if !(self.cam_scale > 0.0 && self.cam_scale.is_finite()) {
            return Err(Error::InvalidArgument("cam_scale must be positive and finite".into()));
        }
        Ok(())
    }

    /// The rng stream owned by one image.
    pub fn image_rng(&self, image_id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(image_id);
        rng
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnomalyScore {
    pub value: f64,
    pub strategy: Strategy,
    pub image_id: u64,
}

/// Source of stochastic reconstructions.
pub trait Reconstructor {
    fn reconstruct(&self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor>;
}

impl Reconstructor for VaeParams {
    fn reconstruct(&self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        VaeParams::reconstruct(self, x, rng)
    }
}

/// Returns its input unchanged. Test hook forcing `x̂ = x`.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityReconstructor;

impl Reconstructor for IdentityReconstructor {
    fn reconstruct(&self, x: &Tensor, _rng: &mut ChaCha8Rng) -> Result<Tensor> {
        Ok(x.clone())
    }
}

/// Trained models available to the scorer. Either may be absent when the
/// requested strategies do not need it.
#[derive(Clone, Copy, Default)]
pub struct Models<'a> {
    pub vae: Option<&'a dyn Reconstructor>,
    pub regressor: Option<&'a RegressorParams>,
}

impl<'a> Models<'a> {
    pub fn new(vae: &'a dyn Reconstructor, regressor: &'a RegressorParams) -> Self {
        Models {
            vae: Some(vae),
            regressor: Some(regressor),
        }
    }

    fn vae(&self, strategy: Strategy) -> Result<&'a dyn Reconstructor> {
        self.vae.ok_or(Error::ModelMissing {
            strategy: strategy.as_str(),
            model: "VAE",
        })
    }

    fn regressor(&self, strategy: Strategy) -> Result<&'a RegressorParams> {
        self.regressor.ok_or(Error::ModelMissing {
            strategy: strategy.as_str(),
            model: "regressor",
        })
    }
}

/// Per-pixel `|x̂ - x|` with the channel axis dropped, shape `[H, W]`.
pub fn loss_image(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    let diff = x.zip_map(x_hat, "loss image", |a, b| (b - a).abs())?;
    let shape = x.shape();
    let hw = match shape.len() {
        3 if shape[0] == 1 => vec![shape[1], shape[2]],
        2 => shape.to_vec(),
        _ => return Err(Error::InvalidArgument(format!("expected a [1, H, W] image, got {shape:?}"))),
    };
    diff.reshape(&hw)
}

fn cam_norm(cam: &Tensor, norm: CamNorm) -> f64 {
    match norm {
        CamNorm::L1 => cam.data().iter().sum(),
        CamNorm::L2 => cam.data().iter().map(|v| v * v).sum::<f64>().sqrt(),
    }
}

/// `(loss ⊙ cam) / max(‖cam‖, epsilon)`.
pub fn spatial_weight(loss: &Tensor, cam: &CamMap, epsilon: f64, norm: CamNorm) -> Result<Tensor> {
    if let Some(bad) = cam.values.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidArgument(format!("cam entries must be nonnegative, found {bad}")));
    }
    let denom = cam_norm(&cam.values, norm).max(epsilon);
    loss.zip_map(&cam.values, "spatial weight", |l, c| l * c / denom)
}

/// Loss totals from one reconstruction trial.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrialTerms {
    /// `Σ |x̂ - x|`
    pub raw: f64,
    /// `Σ |x̂ - x| ⊙ up(cam⁺_x)`
    pub naive: f64,
    /// `Σ |x̂ - x| ⊙ cam`
    pub unnormalized: f64,
    /// `Σ spatial_weight(|x̂ - x|, cam)`
    pub weighted: f64,
}

/// Combines per-trial totals and the regressor output into a score.
/// `likelihood` is required by the strategies that use the regressor.
pub fn aggregate(strategy: Strategy, trials: &[TrialTerms], likelihood: Option<f64>) -> Result<f64> {
    let total = |f: fn(&TrialTerms) -> f64| trials.iter().map(f).sum::<f64>();
    let mean = |f: fn(&TrialTerms) -> f64| total(f) / trials.len() as f64;
    let f = || {
        likelihood.ok_or(Error::ModelMissing {
            strategy: strategy.as_str(),
            model: "regressor",
        })
    };
    if strategy.uses_vae() && trials.is_empty() {
        return Err(Error::InvalidArgument(format!("{strategy} needs at least one trial")));
    }
    Ok(match strategy {
        Strategy::Vae => 0.0 - total(|t| t.raw),
        Strategy::NaiveVaeGradcam => 0.0 - total(|t| t.naive),
        Strategy::SpadeNoNorm => 0.0 - total(|t| t.unnormalized),
        Strategy::Spade => 0.0 - total(|t| t.weighted),
        Strategy::CnnReg => f()?,
        Strategy::VaeCnnReg => f()? - mean(|t| t.raw),
        Strategy::Spader => f()? - mean(|t| t.weighted),
    })
}

fn scaled(mut cam: CamMap, scale: f64) -> CamMap {
    if scale != 1.0 {
        cam.values = cam.values.map(|v| v * scale);
    }
    cam
}

/// Everything computed while scoring one image.
struct ImageTerms {
    likelihood: Option<f64>,
    trials: Vec<TrialTerms>,
}

fn image_terms(
    x: &Tensor,
    image_id: u64,
    strategies: &[Strategy],
    models: &Models<'_>,
    config: &ScoringConfig,
) -> Result<ImageTerms> {
    config.validate()?;
    let needs = |p: fn(Strategy) -> bool| strategies.iter().copied().find(|&s| p(s));
    let reg = needs(Strategy::uses_regressor).map(|s| models.regressor(s)).transpose()?;
    let vae = needs(Strategy::uses_vae).map(|s| models.vae(s)).transpose()?;
    let want_naive = strategies.contains(&Strategy::NaiveVaeGradcam);
    let want_combined = strategies.iter().any(|s| s.uses_combined_cam());

    let mut likelihood = None;
    let mut input_signed = None;
    let mut input_positive_up = None;
    if let Some(reg) = reg {
        let fwd = reg.forward_with_features(x)?;
        likelihood = Some(fwd.prediction());
        if want_naive || want_combined {
            let w = cam_weights(&fwd.tape, fwd.output, fwd.features)?;
            if want_combined {
                input_signed = Some(scaled(cam_signed(&w, fwd.feature_values())?, config.cam_scale));
            }
            if want_naive {
                let pos = scaled(cam_positive(&w, fwd.feature_values())?, config.cam_scale);
                input_positive_up = Some(upsample_bilinear(&pos.values, reg.image_hw)?);
            }
        }
    }

    let mut trials = Vec::new();
    if let Some(vae) = vae {
        let mut rng = config.image_rng(image_id);
        for _ in 0..config.m_trials {
            let x_hat = vae.reconstruct(x, &mut rng)?;
            let loss = loss_image(x, &x_hat)?;
            let mut t = TrialTerms {
                raw: loss.sum(),
                ..TrialTerms::default()
            };
            if let Some(cam) = &input_positive_up {
                t.naive = loss.zip_map(cam, "naive weighting", |l, c| l * c)?.sum();
            }
            if let (Some(reg), Some(signed)) = (reg, &input_signed) {
                let rec = scaled(recon_cam(&x_hat, reg)?, config.cam_scale);
                let cam = combine_maps(signed, &rec, reg.image_hw)?;
                t.unnormalized = loss.zip_map(&cam.values, "cam weighting", |l, c| l * c)?.sum();
                t.weighted = spatial_weight(&loss, &cam, config.epsilon, config.norm)?.sum();
            }
            trials.push(t);
        }
    }
    Ok(ImageTerms { likelihood, trials })
}

/// Scores `x` under several strategies at once. The reconstructions are
/// drawn from the image's own rng stream, so each score equals the one
/// [`score`] returns for that strategy alone.
pub fn score_many(
    x: &Tensor,
    image_id: u64,
    strategies: &[Strategy],
    models: &Models<'_>,
    config: &ScoringConfig,
) -> Result<Vec<AnomalyScore>> {
    let terms = image_terms(x, image_id, strategies, models, config)?;
    strategies
        .iter()
        .map(|&strategy| {
            let value = aggregate(strategy, &terms.trials, terms.likelihood)?;
            if !value.is_finite() {
                return Err(Error::InvalidArgument(format!("{strategy} produced non-finite score {value}")));
            }
            Ok(AnomalyScore {
                value,
                strategy,
                image_id,
            })
        })
        .collect()
}

pub fn score(
    x: &Tensor,
    image_id: u64,
    strategy: Strategy,
    models: &Models<'_>,
    config: &ScoringConfig,
) -> Result<AnomalyScore> {
    Ok(score_many(x, image_id, &[strategy], models, config)?[0])
}

/// Scores every image under every strategy, image-major. Each image uses
/// its own rng stream, so results do not depend on batch composition.
pub fn batch_score(
    images: &[ImageSample],
    strategies: &[Strategy],
    models: &Models<'_>,
    config: &ScoringConfig,
) -> Result<Vec<AnomalyScore>> {
    let mut out = Vec::with_capacity(images.len() * strategies.len());
    for s in images {
        let scores = score_many(&s.pixels, s.id, strategies, models, config).map_err(|e| Error::Image {
            id: s.id,
            source: Box::new(e),
        })?;
        out.extend(scores);
    }
    Ok(out)
}

/// Intermediate maps of the first reconstruction trial, all `[H, W]`.
#[derive(Clone, Debug)]
pub struct Explanation {
    pub input: Tensor,
    pub reconstruction: Tensor,
    pub loss: Tensor,
    pub cam: Tensor,
    pub weighted_loss: Tensor,
}

/// Recomputes trial 0 of the spatially weighted loss for one image.
pub fn explain(x: &Tensor, image_id: u64, models: &Models<'_>, config: &ScoringConfig) -> Result<Explanation> {
    config.validate()?;
    let vae = models.vae(Strategy::Spade)?;
    let reg = models.regressor(Strategy::Spade)?;
    let mut rng = config.image_rng(image_id);
    let x_hat = vae.reconstruct(x, &mut rng)?;
    let loss = loss_image(x, &x_hat)?;
    let fwd = reg.forward_with_features(x)?;
    let w = cam_weights(&fwd.tape, fwd.output, fwd.features)?;
    let signed = scaled(cam_signed(&w, fwd.feature_values())?, config.cam_scale);
    let rec = scaled(recon_cam(&x_hat, reg)?, config.cam_scale);
    let cam = combine_maps(&signed, &rec, reg.image_hw)?;
    debug_assert_eq!(cam.source, CamSource::Combined);
    let weighted_loss = spatial_weight(&loss, &cam, config.epsilon, config.norm)?;
    let hw = loss.shape().to_vec();
    Ok(Explanation {
        input: x.clone().reshape(&hw)?,
        reconstruction: x_hat.reshape(&hw)?,
        loss,
        cam: cam.values,
        weighted_loss,
    })
}
