//! Planar image resampling and PGM output.

use std::io::Write;

/// Bilinear resize of one `h×w` plane to `th×tw` with corner alignment:
/// output corners coincide with input corners.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    debug_assert_eq!(src.len(), h * w);
    let ratio = |n: usize, tn: usize| {
        if tn > 1 {
            (n - 1) as f64 / (tn - 1) as f64
        } else {
            0.0
        }
    };
    let (ry, rx) = (ratio(h, th), ratio(w, tw));
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let fy = y as f64 * ry;
        let y0 = (fy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let dy = fy - y0 as f64;
        for x in 0..tw {
            let fx = x as f64 * rx;
            let x0 = (fx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let dx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - dx) + src[y0 * w + x1] * dx;
            let bottom = src[y1 * w + x0] * (1.0 - dx) + src[y1 * w + x1] * dx;
            out.push(top * (1.0 - dy) + bottom * dy);
        }
    }
    out
}

/// Min-max normalises `values` to bytes; a constant plane maps to zero.
pub fn to_gray_bytes(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

/// Binary PGM (P5) encoding of a `height×width` plane, min-max normalised.
pub fn encode_pgm(values: &[f64], width: usize, height: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(width * height + 16);
    write!(out, "P5\n{width} {height}\n255\n").expect("write to vec");
    out.extend(to_gray_bytes(values));
    out
}
