//! Procedurally rendered digit-like glyphs for offline runs.
//!
//! Each digit is a set of polylines in a unit box (y pointing down). A
//! sample applies a random affine jitter (scale, shear, rotation, offset)
//! and stroke thickness, then rasterises with an anti-aliased distance
//! falloff onto a 28×28 grid.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::idx::{RawDigits, RAW_SIDE};
use crate::tensor::Tensor;

type Point = (f64, f64);

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from_deg: f64, to_deg: f64) -> Vec<Point> {
    let steps = (((to_deg - from_deg).abs() / 12.0).ceil() as usize).max(2);
    (0..=steps)
        .map(|i| {
            let t = (from_deg + (to_deg - from_deg) * i as f64 / steps as f64) * PI / 180.0;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

fn strokes(digit: u8) -> Vec<Vec<Point>> {
    match digit {
        0 => vec![arc(0.0, 0.0, 0.52, 0.85, 0.0, 360.0)],
        1 => vec![
            vec![(0.05, -0.85), (0.05, 0.85)],
            vec![(-0.3, -0.5), (0.05, -0.85)],
        ],
        2 => {
            let mut top = arc(0.0, -0.42, 0.45, 0.43, 180.0, 380.0);
            top.push((-0.5, 0.85));
            top.push((0.55, 0.85));
            vec![top]
        }
        3 => vec![
            arc(0.0, -0.43, 0.42, 0.42, -160.0, 90.0),
            arc(0.0, 0.42, 0.47, 0.43, -90.0, 160.0),
        ],
        4 => vec![
            vec![(0.2, -0.85), (-0.55, 0.3), (0.6, 0.3)],
            vec![(0.25, -0.4), (0.25, 0.85)],
        ],
        5 => {
            let mut s = vec![(0.5, -0.85), (-0.4, -0.85), (-0.45, -0.1)];
            s.extend(arc(0.0, 0.35, 0.48, 0.5, -130.0, 150.0));
            vec![s]
        }
        6 => {
            let mut s = arc(0.5, 0.4, 0.95, 1.25, 270.0, 180.0);
            s.extend(arc(0.0, 0.42, 0.45, 0.43, 180.0, 540.0));
            vec![s]
        }
        7 => vec![vec![(-0.55, -0.85), (0.55, -0.85), (-0.1, 0.85)]],
        8 => vec![
            arc(0.0, -0.47, 0.36, 0.38, 0.0, 360.0),
            arc(0.0, 0.4, 0.45, 0.45, 0.0, 360.0),
        ],
        9 => {
            let mut s = arc(0.0, -0.4, 0.42, 0.43, 0.0, 360.0);
            s.push((0.3, 0.85));
            vec![s]
        }
        _ => unreachable!("digits are 0-9"),
    }
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Renders one jittered glyph of `digit` as a `[1, 28, 28]` tensor.
pub(crate) fn render_glyph<R: Rng>(digit: u8, rng: &mut R) -> Tensor {
    let half_extent = 9.5;
    let scale = rng.gen_range(0.85..1.1);
    let aspect = rng.gen_range(0.9..1.1);
    let shear = rng.gen_range(-0.12..0.12);
    let angle: f64 = rng.gen_range(-0.08..0.08);
    let (ox, oy) = (rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8));
    let thickness = rng.gen_range(1.6..3.0);
    let (sin, cos) = angle.sin_cos();
    let centre = (RAW_SIDE as f64 - 1.0) / 2.0;
    let to_pixels = |(x, y): Point| {
        let x = (x + shear * y) * aspect;
        let (rx, ry) = (x * cos - y * sin, x * sin + y * cos);
        (
            centre + ox + rx * half_extent * scale,
            centre + oy + ry * half_extent * scale,
        )
    };
    let segments: Vec<(Point, Point)> = strokes(digit)
        .into_iter()
        .flat_map(|line| {
            let pts: Vec<Point> = line.into_iter().map(to_pixels).collect();
            pts.windows(2).map(|w| (w[0], w[1])).collect::<Vec<_>>()
        })
        .collect();
    let radius = thickness / 2.0;
    let data = (0..RAW_SIDE * RAW_SIDE)
        .map(|i| {
            let p = ((i % RAW_SIDE) as f64, (i / RAW_SIDE) as f64);
            let d = segments
                .iter()
                .map(|&(a, b)| segment_distance(p, a, b))
                .fold(f64::INFINITY, f64::min);
            (radius + 0.5 - d).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(vec![1, RAW_SIDE, RAW_SIDE], data).expect("28x28 glyph")
}

/// `count_per_digit` glyphs of every digit 0–9. Glyph `k` of digit `d` is
/// drawn from its own per-digit stream, so it does not depend on
/// `count_per_digit`.
pub fn synth_glyphs<R: Rng>(rng: &mut R, count_per_digit: usize) -> RawDigits {
    let base: u64 = rng.gen();
    let mut images = Vec::with_capacity(10 * count_per_digit);
    let mut labels = Vec::with_capacity(10 * count_per_digit);
    for digit in 0..10u8 {
        let mut stream = ChaCha8Rng::seed_from_u64(base);
        stream.set_stream(digit as u64);
        for _ in 0..count_per_digit {
            images.push(render_glyph(digit, &mut stream));
            labels.push(digit);
        }
    }
    RawDigits { images, labels }
}
