//! Grad-CAM region-of-interest maps from the regressor.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::imageops::resize_bilinear;
use crate::regressor::RegressorParams;
use crate::tensor::Tensor;

/// Which rectification produced a map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CamSource {
    /// `|Σ_k α_k A^k|` on the input image.
    InputAbs,
    /// `ReLU(Σ_k α_k A^k)` on a reconstruction.
    ReconRelu,
    /// Sum of an input map and a reconstruction map.
    Combined,
}

/// Nonnegative per-location weights, shape `[h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    pub values: Tensor,
    pub source: CamSource,
}

/// Channel importances `alpha` and the number of spatial locations `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct CamWeights {
    pub alpha: Vec<f64>,
    pub z: usize,
}

/// `alpha_k = (1/Z) Σ_ij ∂y/∂A_kij` for feature maps `features` of shape
/// `[K, h, w]` recorded on `tape` before the scalar `output`.
pub fn cam_weights(tape: &Tape<'_>, output: Var, features: Var) -> Result<CamWeights> {
    let shape = tape.value(features).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::InvalidArgument(format!("feature maps must be [K, h, w], got {shape:?}")));
    }
    let grad = tape.grad_wrt(output, features)?;
    let z = shape[1] * shape[2];
    let alpha = grad
        .data()
        .chunks(z.max(1))
        .map(|c| c.iter().sum::<f64>() / z as f64)
        .collect();
    Ok(CamWeights { alpha, z })
}

fn weighted_sum(weights: &CamWeights, features: &Tensor) -> Result<Vec<f64>> {
    let shape = features.shape();
    if shape.len() != 3 || shape[0] != weights.alpha.len() || shape[1] * shape[2] != weights.z {
        return Err(Error::ShapeMismatch {
            op: "cam weights vs feature maps",
            left: vec![weights.alpha.len(), weights.z],
            right: shape.to_vec(),
        });
    }
    let mut acc = vec![0.0; weights.z];
    for (a, channel) in weights.alpha.iter().zip(features.data().chunks(weights.z.max(1))) {
        for (s, v) in acc.iter_mut().zip(channel) {
            *s += a * v;
        }
    }
    Ok(acc)
}

fn cam_map(weights: &CamWeights, features: &Tensor, source: CamSource, f: fn(f64) -> f64) -> Result<CamMap> {
    let shape = features.shape();
    let values = weighted_sum(weights, features)?.into_iter().map(f).collect();
    Ok(CamMap {
        values: Tensor::new(vec![shape[1], shape[2]], values)?,
        source,
    })
}

/// `|Σ_k α_k A^k|`.
pub fn cam_signed(weights: &CamWeights, features: &Tensor) -> Result<CamMap> {
    cam_map(weights, features, CamSource::InputAbs, f64::abs)
}

/// `max(0, Σ_k α_k A^k)`.
pub fn cam_positive(weights: &CamWeights, features: &Tensor) -> Result<CamMap> {
    cam_map(weights, features, CamSource::ReconRelu, |v| v.max(0.0))
}

/// Corner-aligned bilinear upsampling of `[h, w]` to `[H, W]`.
pub fn upsample_bilinear(cam: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let shape = cam.shape();
    if shape.len() != 2 {
        return Err(Error::InvalidArgument(format!("cam must be 2-D, got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    if target.0 < h || target.1 < w {
        return Err(Error::InvalidArgument(format!(
            "cannot upsample {h}x{w} to smaller {}x{}",
            target.0, target.1
        )));
    }
    let data = resize_bilinear(cam.data(), h, w, target.0, target.1);
    Tensor::new(vec![target.0, target.1], data)
}

/// Input-branch map `|Σ α A|` for image `x`, at feature resolution.
pub fn input_cam(x: &Tensor, reg: &RegressorParams) -> Result<CamMap> {
    let fwd = reg.forward_with_features(x)?;
    let w = cam_weights(&fwd.tape, fwd.output, fwd.features)?;
    cam_signed(&w, fwd.feature_values())
}

/// Reconstruction-branch map `ReLU(Σ α A)` for `x_hat`, at feature
/// resolution.
pub fn recon_cam(x_hat: &Tensor, reg: &RegressorParams) -> Result<CamMap> {
    let fwd = reg.forward_with_features(x_hat)?;
    let w = cam_weights(&fwd.tape, fwd.output, fwd.features)?;
    cam_positive(&w, fwd.feature_values())
}

/// Sum of two feature-resolution maps after upsampling both to image size.
pub fn combine_maps(input: &CamMap, recon: &CamMap, image_hw: (usize, usize)) -> Result<CamMap> {
    let a = upsample_bilinear(&input.values, image_hw)?;
    let b = upsample_bilinear(&recon.values, image_hw)?;
    Ok(CamMap {
        values: a.zip_map(&b, "combined cam", |p, q| p + q)?,
        source: CamSource::Combined,
    })
}

/// `up(|Σ α_x A_x|) + up(ReLU(Σ α_x̂ A_x̂))`, each branch from its own
/// forward pass, at image resolution.
pub fn combined_cam(x: &Tensor, x_hat: &Tensor, reg: &RegressorParams) -> Result<CamMap> {
    if x.shape() != x_hat.shape() {
        return Err(Error::ShapeMismatch {
            op: "combined cam",
            left: x.shape().to_vec(),
            right: x_hat.shape().to_vec(),
        });
    }
    combine_maps(&input_cam(x, reg)?, &recon_cam(x_hat, reg)?, reg.image_hw)
}
