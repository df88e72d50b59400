//! CNN normalness regressor.
//!
//! A stack of stride-2 3×3 convolutions with ReLU, then a dense layer to one
//! unit and a sigmoid. Trained on normal (target 1) and known-anomaly
//! (target 0) images. The activation after one chosen conv layer is exposed
//! for Grad-CAM.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::dataset::{ImageSample, Role};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Conv2dParams, DenseParams, Parameters};
use crate::tensor::Tensor;
use crate::training::GradAccumulator;
use crate::vae::{stride2_sizes, TrainOutcome};

const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct RegressorConfig {
    pub image_hw: (usize, usize),
    pub channels: Vec<usize>,
    /// Conv layer whose post-ReLU output feeds Grad-CAM; `None` means last.
    pub target_layer_index: Option<usize>,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig {
            image_hw: (84, 84),
            channels: vec![16, 32, 64],
            target_layer_index: None,
        }
    }
}

/// Per-sample training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RegressionLoss {
    /// `|y - f(x)|`
    #[default]
    Absolute,
    /// `(y - f(x))²`
    Squared,
}

impl std::str::FromStr for RegressionLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mae" | "absolute" | "l1" => Ok(RegressionLoss::Absolute),
            "mse" | "squared" | "l2" => Ok(RegressionLoss::Squared),
            other => Err(Error::InvalidArgument(format!("unknown regression loss `{other}`"))),
        }
    }
}

impl std::fmt::Display for RegressionLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegressionLoss::Absolute => "mae",
            RegressionLoss::Squared => "mse",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressorTrainConfig {
    pub epochs: usize,
    /// Even sizes give exactly half normal, half known-anomaly per batch.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: RegressionLoss,
    pub seed: u64,
}

impl Default for RegressorTrainConfig {
    fn default() -> Self {
        RegressorTrainConfig {
            epochs: 10,
            batch_size: 32,
            adam: AdamConfig::default(),
            loss: RegressionLoss::Absolute,
            seed: 0,
        }
    }
}

/// Regression target for a role: 1 for normal, 0 for known anomaly, none
/// for unknown anomalies (never used in training).
pub fn target_of(role: Role) -> Option<f64> {
    match role {
        Role::Normal => Some(1.0),
        Role::KnownAnomaly => Some(0.0),
        Role::UnknownAnomaly => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressorParams {
    pub convs: Vec<Conv2dParams>,
    pub head: DenseParams,
    pub target_layer_index: usize,
    pub image_hw: (usize, usize),
}

/// A recorded forward pass: the output `y` and the feature maps `A`.
pub struct RegressorForward<'p> {
    pub tape: Tape<'p>,
    pub output: Var,
    pub features: Var,
}

impl RegressorForward<'_> {
    pub fn prediction(&self) -> f64 {
        self.tape.value(self.output).item()
    }

    pub fn feature_values(&self) -> &Tensor {
        self.tape.value(self.features)
    }
}

impl RegressorParams {
    pub fn init<R: Rng>(config: &RegressorConfig, rng: &mut R) -> Result<Self> {
        let n = config.channels.len();
        if n == 0 {
            return Err(Error::InvalidArgument("regressor needs at least one conv layer".into()));
        }
        let target = config.target_layer_index.unwrap_or(n - 1);
        if target >= n {
            return Err(Error::InvalidArgument(format!(
                "target_layer_index {target} out of range for {n} conv layers"
            )));
        }
        let mut convs = Vec::with_capacity(n);
        let mut c_in = 1;
        for &c in &config.channels {
            convs.push(Conv2dParams::init(c, c_in, KERNEL, rng));
            c_in = c;
        }
        let (h, w) = stride2_sizes(config.image_hw, n)[n];
        let head = DenseParams::init(1, c_in * h * w, 1.0, rng);
        Ok(RegressorParams {
            convs,
            head,
            target_layer_index: target,
            image_hw: config.image_hw,
        })
    }

    pub fn config(&self) -> RegressorConfig {
        RegressorConfig {
            image_hw: self.image_hw,
            channels: self.convs.iter().map(Conv2dParams::out_channels).collect(),
            target_layer_index: Some(self.target_layer_index),
        }
    }

    /// Shape `[K, h, w]` of the Grad-CAM feature maps.
    pub fn feature_shape(&self) -> [usize; 3] {
        let (h, w) = stride2_sizes(self.image_hw, self.target_layer_index + 1)[self.target_layer_index + 1];
        [self.convs[self.target_layer_index].out_channels(), h, w]
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        let want = [1, self.image_hw.0, self.image_hw.1];
        if x.shape() != want {
            return Err(Error::ShapeMismatch {
                op: "regressor input",
                left: x.shape().to_vec(),
                right: want.to_vec(),
            });
        }
        Ok(())
    }

    fn record<'p>(&'p self, tape: &mut Tape<'p>, x: Var, track: bool) -> Result<(Var, Var, Vec<Var>)> {
        let mut vars = Vec::with_capacity(2 * self.convs.len() + 2);
        let mut h = x;
        let mut features = x;
        for (i, c) in self.convs.iter().enumerate() {
            let (k, b) = c.bind(tape, track);
            vars.extend([k, b]);
            h = tape.conv2d(h, k, b, 2, 1)?;
            h = tape.relu(h)?;
            if i == self.target_layer_index {
                features = h;
            }
        }
        let (w, b) = self.head.bind(tape, track);
        vars.extend([w, b]);
        let logit = tape.dense(h, w, b)?;
        let y = tape.sigmoid(logit)?;
        let y = tape.reshape(y, &[])?;
        Ok((y, features, vars))
    }

    /// Forward pass keeping the tape alive so gradients of the output with
    /// respect to the feature maps can be taken.
    pub fn forward_with_features(&self, x: &Tensor) -> Result<RegressorForward<'_>> {
        self.check_image(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (output, features, _) = self.record(&mut tape, xv, false)?;
        Ok(RegressorForward {
            tape,
            output,
            features,
        })
    }

    /// Normalness likelihood `f(x)` in (0, 1).
    pub fn predict(&self, x: &Tensor) -> Result<f64> {
        Ok(self.forward_with_features(x)?.prediction())
    }

    /// Loss of a single labelled image, optionally returning parameter
    /// gradients in [`Parameters`] order.
    pub(crate) fn loss_graph<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        x: &Tensor,
        target: f64,
        loss: RegressionLoss,
        track: bool,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_image(x)?;
        let xv = tape.constant(x.clone());
        let (y, _, vars) = self.record(tape, xv, track)?;
        let t = tape.constant(Tensor::scalar(target));
        let diff = tape.sub(y, t)?;
        let l = match loss {
            RegressionLoss::Absolute => tape.abs(diff)?,
            RegressionLoss::Squared => tape.square(diff)?,
        };
        Ok((l, vars))
    }

    /// Loss of `x` against `target` and its gradient with respect to every
    /// parameter, in [`Parameters`] order.
    pub fn loss_and_grads(&self, x: &Tensor, target: f64, loss: RegressionLoss) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let (l, vars) = self.loss_graph(&mut tape, x, target, loss, true)?;
        let grads = tape.backward(l)?;
        let per_param = vars
            .iter()
            .zip(self.named_tensors())
            .map(|(&v, (_, t))| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((tape.value(l).item(), per_param))
    }

    /// Loss of `x` against `target` without gradients.
    pub fn sample_loss(&self, x: &Tensor, target: f64, loss: RegressionLoss) -> Result<f64> {
        let mut tape = Tape::new();
        let (l, _) = self.loss_graph(&mut tape, x, target, loss, false)?;
        Ok(tape.value(l).item())
    }
}

impl Parameters for RegressorParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("reg.conv{i}.kernel"), &c.kernel));
            out.push((format!("reg.conv{i}.bias"), &c.bias));
        }
        out.push(("reg.head.weight".into(), &self.head.weight));
        out.push(("reg.head.bias".into(), &self.head.bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.kernel);
            out.push(&mut c.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }
}

/// Endless shuffled walk over a set of indices, reshuffled at each pass.
struct Cycler {
    items: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn next<R: Rng>(&mut self, rng: &mut R) -> usize {
        if self.pos == 0 {
            self.items.shuffle(rng);
        }
        let v = self.items[self.pos];
        self.pos = (self.pos + 1) % self.items.len();
        v
    }
}

/// Fits the regressor on normal and known-anomaly images with balanced
/// mini-batches. One epoch draws as many samples as the training set holds.
pub fn train_regressor(
    samples: &[ImageSample],
    arch: &RegressorConfig,
    config: &RegressorTrainConfig,
) -> Result<TrainOutcome<RegressorParams>> {
    train_regressor_with(samples, arch, config, |_, _| {})
}

/// [`train_regressor`] with a per-epoch `(epoch, mean_loss)` callback.
pub fn train_regressor_with(
    samples: &[ImageSample],
    arch: &RegressorConfig,
    config: &RegressorTrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome<RegressorParams>> {
    if let Some(bad) = samples.iter().find(|s| s.role == Role::UnknownAnomaly) {
        return Err(Error::InvalidArgument(format!(
            "regressor trains on normal and known-anomaly images only; sample {} is {}",
            bad.id, bad.role
        )));
    }
    let (normal, anomaly): (Vec<usize>, Vec<usize>) =
        (0..samples.len()).partition(|&i| samples[i].role == Role::Normal);
    if normal.is_empty() || anomaly.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "regressor needs both labels; got {} normal and {} known-anomaly images",
            normal.len(),
            anomaly.len()
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = RegressorParams::init(arch, &mut rng)?;
    let mut adam = Adam::new(config.adam, &params);
    let mut acc = GradAccumulator::new(&params);
    let mut pools = [
        Cycler { items: normal, pos: 0 },
        Cycler { items: anomaly, pos: 0 },
    ];
    let per_epoch = samples.len();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut total = 0.0;
        let mut drawn = 0;
        while drawn < per_epoch {
            let batch = config.batch_size.min(per_epoch - drawn);
            for j in 0..batch {
                // Alternate pools so every batch is balanced.
                let i = pools[(drawn + j) % 2].next(&mut rng);
                let s = &samples[i];
                let target = target_of(s.role).expect("filtered above");
                let mut tape = Tape::new();
                let (l, vars) = params.loss_graph(&mut tape, &s.pixels, target, config.loss, true)?;
                total += tape.value(l).item();
                let grads = tape.backward(l)?;
                acc.add(&grads, &vars);
            }
            drawn += batch;
            let grads = acc.take_mean();
            adam.step(&mut params, &grads)?;
        }
        let mean = total / per_epoch as f64;
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok(TrainOutcome {
        params,
        loss_history: history,
    })
}
