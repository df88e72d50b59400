//! Mini-batch plumbing shared by the VAE and regressor training loops.

use crate::autodiff::{Gradients, Var};
use crate::params::Parameters;
use crate::tensor::Tensor;

/// Sums per-sample parameter gradients across a mini-batch.
pub(crate) struct GradAccumulator {
    sums: Vec<Tensor>,
    count: usize,
}

impl GradAccumulator {
    pub fn new<P: Parameters>(params: &P) -> Self {
        GradAccumulator {
            sums: params
                .named_tensors()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
            count: 0,
        }
    }

    /// Adds the gradients of `vars` (bound in parameter order).
    pub fn add(&mut self, grads: &Gradients, vars: &[Var]) {
        debug_assert_eq!(vars.len(), self.sums.len());
        for (sum, &v) in self.sums.iter_mut().zip(vars) {
            if let Some(g) = grads.get(v) {
                sum.add_assign(g);
            }
        }
        self.count += 1;
    }

    /// Batch-mean gradients, resetting the accumulator.
    pub fn take_mean(&mut self) -> Vec<Option<Tensor>> {
        let scale = 1.0 / self.count.max(1) as f64;
        self.count = 0;
        self.sums
            .iter_mut()
            .map(|s| {
                let mean = s.map(|v| v * scale);
                s.data_mut().fill(0.0);
                Some(mean)
            })
            .collect()
    }
}
