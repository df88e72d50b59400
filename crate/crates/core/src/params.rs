//! Layer parameter blocks and the [`Parameters`] trait used by the
//! optimizer and the weights file.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

/// Kernel `[C_out, C_in, k, k]` and bias `[C_out]` of one conv layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl Conv2dParams {
    /// He-normal initialisation, zero bias.
    pub fn init<R: Rng>(c_out: usize, c_in: usize, k: usize, rng: &mut R) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let kernel = normal_tensor(&[c_out, c_in, k, k], (2.0 / fan_in).sqrt(), rng);
        Conv2dParams {
            kernel,
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub(crate) fn bind<'p>(&'p self, tape: &mut Tape<'p>, track: bool) -> (Var, Var) {
        (bind(tape, &self.kernel, track), bind(tape, &self.bias, track))
    }
}

/// Weight `[M, N]` and bias `[M]` of a fully connected layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseParams {
    /// Glorot-normal initialisation scaled by `gain`, zero bias.
    pub fn init<R: Rng>(out: usize, inp: usize, gain: f64, rng: &mut R) -> Self {
        let std = gain * (2.0 / (out + inp) as f64).sqrt();
        DenseParams {
            weight: normal_tensor(&[out, inp], std, rng),
            bias: Tensor::zeros(&[out]),
        }
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub(crate) fn bind<'p>(&'p self, tape: &mut Tape<'p>, track: bool) -> (Var, Var) {
        (bind(tape, &self.weight, track), bind(tape, &self.bias, track))
    }
}

fn bind<'p>(tape: &mut Tape<'p>, t: &'p Tensor, track: bool) -> Var {
    if track {
        tape.param(t)
    } else {
        tape.frozen(t)
    }
}

fn normal_tensor<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        .expect("shape matches length")
}

/// A model whose trainable tensors can be enumerated in a fixed order.
pub trait Parameters {
    /// Every trainable tensor with a stable, unique name.
    fn named_tensors(&self) -> Vec<(String, &Tensor)>;

    /// Mutable access in the same order as [`Parameters::named_tensors`].
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}
