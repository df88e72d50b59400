//! Raw numeric kernels shared by the tape operations.

use std::ops::Range;

/// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of size m×k and
/// `op(b)` of size k×n, all row-major. `a_t`/`b_t` select transposed storage.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 1 || n == 1 {
        return gemm_thin(m, k, n, a, a_t, b, b_t, beta, c);
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above match the strides passed in.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Freshly allocated `op(a) * op(b)`.
pub(crate) fn gemm_new(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool) -> Vec<f64> {
    if m == 1 || n == 1 || k == 0 {
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a, a_t, b, b_t, 0.0, &mut c);
        return c;
    }
    if k == 1 {
        // Outer product; storage order of a 1-column/1-row operand is moot.
        let mut c = Vec::with_capacity(m * n);
        for &ai in a {
            c.extend(b.iter().map(|&bj| ai * bj));
        }
        return c;
    }
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let mut c: Vec<f64> = Vec::with_capacity(m * n);
    // SAFETY: with beta = 0 dgemm writes every element of C without reading
    // it, so the buffer is fully initialised before `set_len`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        c.set_len(m * n);
    }
    c
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += alpha * x;
    }
}

/// Matrix-vector shapes (`m == 1` or `n == 1`), where a blocked GEMM
/// spends most of its time packing.
#[allow(clippy::too_many_arguments)]
fn gemm_thin(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    if beta == 0.0 {
        c.fill(0.0);
    } else if beta != 1.0 {
        c.iter_mut().for_each(|v| *v *= beta);
    }
    if n == 1 {
        // c[i] += Σ_p A(i,p) b[p]; b is a k-vector regardless of b_t.
        if a_t {
            for (p, row) in a.chunks_exact(m).enumerate() {
                axpy(b[p], row, c);
            }
        } else {
            for (ci, row) in c.iter_mut().zip(a.chunks_exact(k)) {
                *ci += dot(row, b);
            }
        }
    } else {
        // m == 1: c[j] += Σ_p a[p] B(p,j); a is a k-vector regardless of a_t.
        if b_t {
            for (cj, row) in c.iter_mut().zip(b.chunks_exact(k)) {
                *cj += dot(a, row);
            }
        } else {
            for (p, row) in b.chunks_exact(n).enumerate() {
                axpy(a[p], row, c);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds the input into a `[c_in*kh*kw, out_h*out_w]` patch matrix.
#[cfg(test)]
pub(crate) fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    im2col_rows(input, g, 0..g.out_h)
}

/// Patch matrix restricted to output rows `rows`:
/// `[c_in*kh*kw, rows.len()*out_w]`.
pub(crate) fn im2col_rows(input: &[f64], g: &ConvGeometry, rows: Range<usize>) -> Vec<f64> {
    let band = rows.len() * g.out_w;
    let mut cols = Vec::with_capacity(g.patch_len() * band);
    let pad = g.padding as isize;
    let zeros = |cols: &mut Vec<f64>, n: usize| cols.extend(std::iter::repeat(0.0).take(n));
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                for oy in rows.clone() {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        zeros(&mut cols, g.out_w);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(kj, pad, g.w, g.out_w);
                        zeros(&mut cols, lo);
                        if lo < hi {
                            let off = ((lo + kj) as isize - pad) as usize;
                            cols.extend_from_slice(&src[off..off + hi - lo]);
                        }
                        zeros(&mut cols, g.out_w - hi.max(lo));
                        continue;
                    }
                    cols.extend((0..g.out_w).map(|ox| {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            src[ix as usize]
                        } else {
                            0.0
                        }
                    }));
                }
            }
        }
    }
    debug_assert_eq!(cols.len(), g.patch_len() * band);
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
#[cfg(test)]
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut out = vec![0.0; g.c_in * g.h * g.w];
    col2im_rows(cols, g, 0..g.out_h, &mut out);
    out
}

/// Adjoint of [`im2col_rows`], accumulating into `out`.
pub(crate) fn col2im_rows(cols: &[f64], g: &ConvGeometry, rows: Range<usize>, out: &mut [f64]) {
    let n = rows.len() * g.out_w;
    let first = rows.start;
    let pad = g.padding as isize;
    for c in 0..g.c_in {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in rows.clone() {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let in_row = &src[(oy - first) * g.out_w..(oy - first + 1) * g.out_w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(kj, pad, g.w, g.out_w);
                        if lo < hi {
                            let off = ((lo + kj) as isize - pad) as usize;
                            for (d, &v) in dst[off..off + hi - lo].iter_mut().zip(&in_row[lo..hi]) {
                                *d += v;
                            }
                        }
                        continue;
                    }
                    for (ox, &v) in in_row.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Patch-matrix elements per band; keeps a band's patches in L2.
const BAND_ELEMS: usize = 128 * 1024;

fn bands(g: &ConvGeometry) -> impl Iterator<Item = Range<usize>> {
    let per = (BAND_ELEMS / (g.patch_len() * g.out_w).max(1)).clamp(1, g.out_h.max(1));
    let out_h = g.out_h;
    (0..out_h).step_by(per).map(move |r| r..(r + per).min(out_h))
}

/// Convolution output `[c_out, out_h*out_w]`, computed band by band.
pub(crate) fn conv_forward(input: &[f64], kernel: &[f64], bias: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let c_out = bias.len();
    let n = g.out_len();
    let mut out = vec![0.0; c_out * n];
    for rows in bands(g) {
        let cols = im2col_rows(input, g, rows.clone());
        let band = rows.len() * g.out_w;
        let block = gemm_new(c_out, g.patch_len(), band, kernel, false, &cols, false);
        let start = rows.start * g.out_w;
        for ((dst, src), &b) in out.chunks_exact_mut(n).zip(block.chunks_exact(band)).zip(bias) {
            for (d, &v) in dst[start..start + band].iter_mut().zip(src) {
                *d = v + b;
            }
        }
    }
    out
}

/// Kernel and input gradients of a convolution given the output gradient
/// `gout` (`[c_out, out_h*out_w]`). Either may be skipped.
pub(crate) fn conv_backward(
    input: &[f64],
    kernel: &[f64],
    gout: &[f64],
    g: &ConvGeometry,
    want_kernel: bool,
    want_input: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let n = g.out_len();
    let c_out = gout.len() / n.max(1);
    let p = g.patch_len();
    let mut dk = want_kernel.then(|| vec![0.0; c_out * p]);
    let mut dx = want_input.then(|| vec![0.0; g.c_in * g.h * g.w]);
    for rows in bands(g) {
        let band = rows.len() * g.out_w;
        let start = rows.start * g.out_w;
        let gband: Vec<f64> = gout
            .chunks_exact(n)
            .flat_map(|row| row[start..start + band].iter().copied())
            .collect();
        if let Some(dk) = dk.as_mut() {
            let cols = im2col_rows(input, g, rows.clone());
            gemm(c_out, band, p, &gband, false, &cols, true, 1.0, dk);
        }
        if let Some(dx) = dx.as_mut() {
            let dcols = gemm_new(p, c_out, band, kernel, true, &gband, false);
            col2im_rows(&dcols, g, rows, dx);
        }
    }
    (dk, dx)
}

/// Output columns `[lo, hi)` whose stride-1 source column `ox + kj - pad`
/// lies inside `[0, w)`.
#[inline]
fn valid_span(kj: usize, pad: isize, w: usize, out_w: usize) -> (usize, usize) {
    let shift = kj as isize - pad;
    let lo = (-shift).max(0) as usize;
    let hi = ((w as isize - shift).max(0) as usize).min(out_w);
    (lo.min(hi), hi)
}

/// Source index along one axis for nearest-neighbour resizing.
#[inline]
pub(crate) fn nearest_index(dst: usize, src_len: usize, dst_len: usize) -> usize {
    (dst * src_len / dst_len).min(src_len - 1)
}
