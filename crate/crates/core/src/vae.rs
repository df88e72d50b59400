//! Convolutional variational autoencoder trained on normal images only.
//!
//! Encoder: stride-2 3×3 convolutions with ReLU, flattened into two dense
//! heads for the posterior mean and log-variance. Decoder: a dense layer back
//! to the deepest feature grid, then for each encoder stage in reverse a
//! nearest-neighbour resize to that stage's input resolution followed by a
//! stride-1 3×3 convolution. The last convolution emits one channel through a
//! sigmoid, so reconstructions lie in (0, 1).
//!
//! The training objective is the negative single-sample ELBO with a Gaussian
//! decoder: `beta_rec * Σ (x̂ - x)² + KL(q(z|x) || N(0, I))`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::dataset::{ImageSample, Role};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Conv2dParams, DenseParams, Parameters};
use crate::tensor::Tensor;
use crate::training::GradAccumulator;

const KERNEL: usize = 3;

/// Architecture of the VAE.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    pub image_hw: (usize, usize),
    /// Output channels of each encoder convolution.
    pub channels: Vec<usize>,
    pub latent_dim: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            image_hw: (84, 84),
            channels: vec![16, 32, 64, 128],
            latent_dim: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Weight of the summed squared reconstruction error.
    pub beta_rec: f64,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            epochs: 20,
            batch_size: 32,
            adam: AdamConfig::default(),
            beta_rec: 1.0,
            seed: 0,
        }
    }
}

/// Trained parameters plus the per-epoch mean training loss.
#[derive(Clone, Debug)]
pub struct TrainOutcome<P> {
    pub params: P,
    pub loss_history: Vec<f64>,
}

/// Posterior statistics and the latent draw made from them.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub mu: Tensor,
    pub logvar: Tensor,
    pub z: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeParams {
    pub encoder: Vec<Conv2dParams>,
    pub mu_head: DenseParams,
    pub logvar_head: DenseParams,
    pub decoder_input: DenseParams,
    pub decoder: Vec<Conv2dParams>,
    pub image_hw: (usize, usize),
}

/// Spatial size after each stride-2, pad-1, 3×3 convolution, starting with
/// the input size.
pub(crate) fn stride2_sizes(hw: (usize, usize), layers: usize) -> Vec<(usize, usize)> {
    let mut sizes = vec![hw];
    let mut cur = hw;
    for _ in 0..layers {
        cur = ((cur.0 - 1) / 2 + 1, (cur.1 - 1) / 2 + 1);
        sizes.push(cur);
    }
    sizes
}

struct Bound {
    encoder: Vec<(Var, Var)>,
    mu: (Var, Var),
    logvar: (Var, Var),
    decoder_input: (Var, Var),
    decoder: Vec<(Var, Var)>,
}

impl Bound {
    fn ordered(&self) -> Vec<Var> {
        let mut out = Vec::new();
        let mut push = |p: &(Var, Var)| {
            out.push(p.0);
            out.push(p.1);
        };
        self.encoder.iter().for_each(&mut push);
        push(&self.mu);
        push(&self.logvar);
        push(&self.decoder_input);
        self.decoder.iter().for_each(&mut push);
        out
    }
}

/// Vars of one ELBO evaluation recorded on a tape.
pub(crate) struct ElboGraph {
    pub loss: Var,
    pub params: Vec<Var>,
}

impl VaeParams {
    pub fn init<R: Rng>(config: &VaeConfig, rng: &mut R) -> Result<Self> {
        if config.channels.is_empty() || config.latent_dim == 0 {
            return Err(Error::InvalidArgument(
                "VAE needs at least one conv layer and a nonzero latent size".into(),
            ));
        }
        let n = config.channels.len();
        let sizes = stride2_sizes(config.image_hw, n);
        let mut encoder = Vec::with_capacity(n);
        let mut c_in = 1;
        for &c in &config.channels {
            encoder.push(Conv2dParams::init(c, c_in, KERNEL, rng));
            c_in = c;
        }
        let (dh, dw) = sizes[n];
        let flat = c_in * dh * dw;
        let mu_head = DenseParams::init(config.latent_dim, flat, 1.0, rng);
        let logvar_head = DenseParams::init(config.latent_dim, flat, 0.1, rng);
        let decoder_input = DenseParams::init(flat, config.latent_dim, 1.0, rng);
        let mut decoder = Vec::with_capacity(n);
        for i in (0..n).rev() {
            let out = if i == 0 { 1 } else { config.channels[i - 1] };
            decoder.push(Conv2dParams::init(out, config.channels[i], KERNEL, rng));
        }
        Ok(VaeParams {
            encoder,
            mu_head,
            logvar_head,
            decoder_input,
            decoder,
            image_hw: config.image_hw,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.mu_head.out_features()
    }

    pub fn config(&self) -> VaeConfig {
        VaeConfig {
            image_hw: self.image_hw,
            channels: self.encoder.iter().map(Conv2dParams::out_channels).collect(),
            latent_dim: self.latent_dim(),
        }
    }

    fn bind<'p>(&'p self, tape: &mut Tape<'p>, track: bool) -> Bound {
        Bound {
            encoder: self.encoder.iter().map(|c| c.bind(tape, track)).collect(),
            mu: self.mu_head.bind(tape, track),
            logvar: self.logvar_head.bind(tape, track),
            decoder_input: self.decoder_input.bind(tape, track),
            decoder: self.decoder.iter().map(|c| c.bind(tape, track)).collect(),
        }
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        let want = [1, self.image_hw.0, self.image_hw.1];
        if x.shape() != want {
            return Err(Error::ShapeMismatch {
                op: "vae input",
                left: x.shape().to_vec(),
                right: want.to_vec(),
            });
        }
        Ok(())
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        if z.len() != self.latent_dim() {
            return Err(Error::ShapeMismatch {
                op: "vae latent",
                left: z.shape().to_vec(),
                right: vec![self.latent_dim()],
            });
        }
        Ok(())
    }

    fn encode_on(&self, tape: &mut Tape<'_>, b: &Bound, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        for &(k, bias) in &b.encoder {
            h = tape.conv2d(h, k, bias, 2, 1)?;
            h = tape.relu(h)?;
        }
        let mu = tape.dense(h, b.mu.0, b.mu.1)?;
        let logvar = tape.dense(h, b.logvar.0, b.logvar.1)?;
        Ok((mu, logvar))
    }

    fn decode_on(&self, tape: &mut Tape<'_>, b: &Bound, z: Var) -> Result<Var> {
        let n = self.encoder.len();
        let sizes = stride2_sizes(self.image_hw, n);
        let (dh, dw) = sizes[n];
        let c = self.encoder[n - 1].out_channels();
        let mut h = tape.dense(z, b.decoder_input.0, b.decoder_input.1)?;
        h = tape.relu(h)?;
        h = tape.reshape(h, &[c, dh, dw])?;
        for (step, &(k, bias)) in b.decoder.iter().enumerate() {
            let target = sizes[n - 1 - step];
            h = tape.resize_nearest(h, target)?;
            h = tape.conv2d(h, k, bias, 1, 1)?;
            h = if step + 1 == n {
                tape.sigmoid(h)?
            } else {
                tape.relu(h)?
            };
        }
        Ok(h)
    }

    /// Posterior mean and log-variance for `x` of shape `[1, H, W]`.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_image(x)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (mu, logvar) = self.encode_on(&mut tape, &b, xv)?;
        Ok((tape.value(mu).clone(), tape.value(logvar).clone()))
    }

    /// Decoder mean `x̂` for latent `z`, shape `[1, H, W]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.check_latent(z)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone().reshape(&[z.len()])?);
        let out = self.decode_on(&mut tape, &b, zv)?;
        Ok(tape.value(out).clone())
    }

    /// Encodes, samples a latent, and decodes; stochastic through `rng`.
    pub fn reconstruct<R: Rng>(&self, x: &Tensor, rng: &mut R) -> Result<Tensor> {
        Ok(self.reconstruct_with_latent(x, rng)?.0)
    }

    pub fn reconstruct_with_latent<R: Rng>(
        &self,
        x: &Tensor,
        rng: &mut R,
    ) -> Result<(Tensor, LatentSample)> {
        let (mu, logvar) = self.encode(x)?;
        let z = reparameterize(&mu, &logvar, rng)?;
        let recon = self.decode(&z)?;
        Ok((recon, LatentSample { mu, logvar, z }))
    }

    /// Records one single-sample ELBO evaluation on `tape` with noise `eps`.
    pub(crate) fn elbo_graph<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        x: &Tensor,
        eps: Tensor,
        beta_rec: f64,
        track: bool,
    ) -> Result<ElboGraph> {
        self.check_image(x)?;
        let b = self.bind(tape, track);
        let xv = tape.constant(x.clone());
        let (mu, logvar) = self.encode_on(tape, &b, xv)?;
        let z = reparameterize_on(tape, mu, logvar, eps)?;
        let recon = self.decode_on(tape, &b, z)?;
        let diff = tape.sub(recon, xv)?;
        let sq = tape.square(diff)?;
        let sse = tape.sum(sq)?;
        let rec = tape.scale(sse, beta_rec)?;
        let kl = kl_on(tape, mu, logvar)?;
        let loss = tape.add(rec, kl)?;
        Ok(ElboGraph {
            loss,
            params: b.ordered(),
        })
    }

    /// Negative ELBO with fixed latent noise `eps` and its gradient with
    /// respect to every parameter, in [`Parameters`] order.
    pub fn elbo_loss_and_grads(&self, x: &Tensor, eps: &Tensor, beta_rec: f64) -> Result<(f64, Vec<Tensor>)> {
        self.check_latent(eps)?;
        let mut tape = Tape::new();
        let g = self.elbo_graph(&mut tape, x, eps.clone(), beta_rec, true)?;
        let grads = tape.backward(g.loss)?;
        let per_param = g
            .params
            .iter()
            .zip(self.named_tensors())
            .map(|(&v, (_, t))| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((tape.value(g.loss).item(), per_param))
    }

    /// Negative ELBO with fixed latent noise `eps`.
    pub fn elbo_loss_with(&self, x: &Tensor, eps: &Tensor, beta_rec: f64) -> Result<f64> {
        self.check_latent(eps)?;
        let mut tape = Tape::new();
        let g = self.elbo_graph(&mut tape, x, eps.clone(), beta_rec, false)?;
        Ok(tape.value(g.loss).item())
    }

    /// Negative single-sample ELBO of `x`: `beta_rec·SSE(x̂, x) + KL`.
    pub fn elbo_loss<R: Rng>(&self, x: &Tensor, rng: &mut R, beta_rec: f64) -> Result<f64> {
        let eps = standard_normal(self.latent_dim(), rng);
        let mut tape = Tape::new();
        let g = self.elbo_graph(&mut tape, x, eps, beta_rec, false)?;
        Ok(tape.value(g.loss).item())
    }
}

impl Parameters for VaeParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.encoder.iter().enumerate() {
            out.push((format!("vae.enc{i}.kernel"), &c.kernel));
            out.push((format!("vae.enc{i}.bias"), &c.bias));
        }
        out.push(("vae.mu.weight".into(), &self.mu_head.weight));
        out.push(("vae.mu.bias".into(), &self.mu_head.bias));
        out.push(("vae.logvar.weight".into(), &self.logvar_head.weight));
        out.push(("vae.logvar.bias".into(), &self.logvar_head.bias));
        out.push(("vae.dec_in.weight".into(), &self.decoder_input.weight));
        out.push(("vae.dec_in.bias".into(), &self.decoder_input.bias));
        for (i, c) in self.decoder.iter().enumerate() {
            out.push((format!("vae.dec{i}.kernel"), &c.kernel));
            out.push((format!("vae.dec{i}.bias"), &c.bias));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.encoder {
            out.push(&mut c.kernel);
            out.push(&mut c.bias);
        }
        out.push(&mut self.mu_head.weight);
        out.push(&mut self.mu_head.bias);
        out.push(&mut self.logvar_head.weight);
        out.push(&mut self.logvar_head.bias);
        out.push(&mut self.decoder_input.weight);
        out.push(&mut self.decoder_input.bias);
        for c in &mut self.decoder {
            out.push(&mut c.kernel);
            out.push(&mut c.bias);
        }
        out
    }
}

pub(crate) fn standard_normal<R: Rng>(n: usize, rng: &mut R) -> Tensor {
    Tensor::vector((0..n).map(|_| rng.sample(StandardNormal)).collect())
}

fn check_pair(mu: &Tensor, logvar: &Tensor) -> Result<()> {
    if mu.len() != logvar.len() {
        return Err(Error::ShapeMismatch {
            op: "mu vs logvar",
            left: mu.shape().to_vec(),
            right: logvar.shape().to_vec(),
        });
    }
    Ok(())
}

/// `z = mu + exp(logvar / 2) · eps` with `eps ~ N(0, I)` drawn from `rng`.
pub fn reparameterize<R: Rng>(mu: &Tensor, logvar: &Tensor, rng: &mut R) -> Result<Tensor> {
    check_pair(mu, logvar)?;
    let eps = standard_normal(mu.len(), rng);
    reparameterize_with(mu, logvar, &eps)
}

/// Reparameterisation with caller-supplied noise.
pub fn reparameterize_with(mu: &Tensor, logvar: &Tensor, eps: &Tensor) -> Result<Tensor> {
    check_pair(mu, logvar)?;
    check_pair(mu, eps)?;
    let data = mu
        .data()
        .iter()
        .zip(logvar.data())
        .zip(eps.data())
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect();
    Ok(Tensor::vector(data))
}

fn reparameterize_on(tape: &mut Tape<'_>, mu: Var, logvar: Var, eps: Tensor) -> Result<Var> {
    let half = tape.scale(logvar, 0.5)?;
    let std = tape.exp(half)?;
    let eps = tape.constant(eps);
    let noise = tape.mul(std, eps)?;
    tape.add(mu, noise)
}

/// KL(N(mu, diag(exp(logvar))) || N(0, I)).
pub fn kl_divergence(mu: &Tensor, logvar: &Tensor) -> Result<f64> {
    check_pair(mu, logvar)?;
    Ok(0.5
        * mu.data()
            .iter()
            .zip(logvar.data())
            .map(|(&m, &lv)| m * m + lv.exp() - 1.0 - lv)
            .sum::<f64>())
}

fn kl_on(tape: &mut Tape<'_>, mu: Var, logvar: Var) -> Result<Var> {
    let latent = tape.value(mu).len() as f64;
    let mu_sq = tape.square(mu)?;
    let var = tape.exp(logvar)?;
    let t = tape.add(mu_sq, var)?;
    let t = tape.sub(t, logvar)?;
    let s = tape.sum(t)?;
    let half = tape.scale(s, 0.5)?;
    let offset = tape.constant(Tensor::scalar(0.5 * latent));
    tape.sub(half, offset)
}

/// Fits a VAE to normal-role images by minimising the negative ELBO with
/// Adam. Deterministic for a fixed `config.seed`.
pub fn train_vae(
    samples: &[ImageSample],
    arch: &VaeConfig,
    config: &VaeTrainConfig,
) -> Result<TrainOutcome<VaeParams>> {
    train_vae_with(samples, arch, config, |_, _| {})
}

/// [`train_vae`] with a callback invoked after each epoch with
/// `(epoch, mean_loss)`.
pub fn train_vae_with(
    samples: &[ImageSample],
    arch: &VaeConfig,
    config: &VaeTrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome<VaeParams>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("VAE training set is empty".into()));
    }
    if let Some(bad) = samples.iter().find(|s| s.role != Role::Normal) {
        return Err(Error::InvalidArgument(format!(
            "VAE trains on normal images only; sample {} has role {}",
            bad.id, bad.role
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = VaeParams::init(arch, &mut rng)?;
    let mut adam = Adam::new(config.adam, &params);
    let mut acc = GradAccumulator::new(&params);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            for &i in batch {
                let eps = standard_normal(params.latent_dim(), &mut rng);
                let mut tape = Tape::new();
                let g = params.elbo_graph(&mut tape, &samples[i].pixels, eps, config.beta_rec, true)?;
                total += tape.value(g.loss).item();
                let grads = tape.backward(g.loss)?;
                acc.add(&grads, &g.params);
            }
            let grads = acc.take_mean();
            adam.step(&mut params, &grads)?;
        }
        let mean = total / samples.len() as f64;
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok(TrainOutcome {
        params,
        loss_history: history,
    })
}
