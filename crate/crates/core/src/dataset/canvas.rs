//! Placement of a digit on the 84×84 canvas and per-image Gaussian noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imageops::resize_bilinear;
use crate::tensor::Tensor;

pub const CANVAS: usize = 84;
pub const MIN_SCALE: f64 = 1.0;
pub const MAX_SCALE: f64 = 2.5;

/// Per-image noise level σ ~ N(sigma_mean, sigma_std²), clamped at zero, in
/// units of `pixel_scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseConfig {
    pub sigma_mean: f64,
    pub sigma_std: f64,
    pub pixel_scale: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma_mean: 40.0,
            sigma_std: 30.0,
            pixel_scale: 255.0,
        }
    }
}

impl NoiseConfig {
    /// Noise disabled (σ is always 0).
    pub fn clean() -> Self {
        NoiseConfig {
            sigma_mean: 0.0,
            sigma_std: 0.0,
            ..Self::default()
        }
    }

    pub fn draw_sigma<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.sigma_std == 0.0 {
            return self.sigma_mean.max(0.0);
        }
        let dist = Normal::new(self.sigma_mean, self.sigma_std).expect("finite noise std");
        dist.sample(rng).max(0.0)
    }
}

/// Scales the digit by a uniform factor in [1.0, 2.5] and places it at a
/// uniform position fully inside the canvas.
pub fn compose_canvas<R: Rng>(digit: &Tensor, rng: &mut R) -> Result<Tensor> {
    let scale = rng.gen_range(MIN_SCALE..=MAX_SCALE);
    let side = scaled_side(digit, scale)?;
    let max_pos = CANVAS - side;
    let row = rng.gen_range(0..=max_pos);
    let col = rng.gen_range(0..=max_pos);
    compose_canvas_at(digit, scale, (row, col))
}

fn scaled_side(digit: &Tensor, scale: f64) -> Result<usize> {
    let s = digit.shape();
    if s.len() != 3 || s[0] != 1 || s[1] != s[2] {
        return Err(Error::ShapeMismatch {
            op: "compose_canvas (expects a square [1, n, n] digit)",
            left: s.to_vec(),
            right: vec![1, 28, 28],
        });
    }
    let side = (s[1] as f64 * scale).round() as usize;
    if side == 0 || side > CANVAS {
        return Err(Error::InvalidArgument(format!(
            "scaled digit side {side} does not fit the {CANVAS}px canvas"
        )));
    }
    Ok(side)
}

/// Deterministic placement: bilinear scale by `scale`, top-left corner at
/// `(row, col)`.
pub fn compose_canvas_at(digit: &Tensor, scale: f64, (row, col): (usize, usize)) -> Result<Tensor> {
    let side = scaled_side(digit, scale)?;
    if row + side > CANVAS || col + side > CANVAS {
        return Err(Error::InvalidArgument(format!(
            "digit of side {side} at ({row}, {col}) leaves the canvas"
        )));
    }
    let n = digit.shape()[1];
    let scaled = resize_bilinear(digit.data(), n, n, side, side);
    let mut canvas = vec![0.0; CANVAS * CANVAS];
    for (y, src) in scaled.chunks(side).enumerate() {
        let start = (row + y) * CANVAS + col;
        canvas[start..start + side].copy_from_slice(src);
    }
    Tensor::new(vec![1, CANVAS, CANVAS], canvas)
}

/// Draws σ once for the image, then adds per-pixel N(0, (σ/scale)²) noise
/// and clips to [0, 1].
pub fn add_noise<R: Rng>(canvas: &Tensor, config: &NoiseConfig, rng: &mut R) -> Tensor {
    let sigma = config.draw_sigma(rng);
    add_noise_with_sigma(canvas, sigma / config.pixel_scale, rng)
}

/// Adds N(0, sigma²) per pixel (sigma in [0, 1] units) and clips.
pub fn add_noise_with_sigma<R: Rng>(canvas: &Tensor, sigma: f64, rng: &mut R) -> Tensor {
    if sigma <= 0.0 {
        return canvas.map(|v| v.clamp(0.0, 1.0));
    }
    let dist = Normal::new(0.0, sigma).expect("finite sigma");
    let data = canvas
        .data()
        .iter()
        .map(|&v| (v + dist.sample(rng)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(canvas.shape().to_vec(), data).expect("same shape")
}
