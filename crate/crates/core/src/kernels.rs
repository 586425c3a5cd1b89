//! Raw loops shared by the differentiable operations.

use alloc::vec;
use alloc::vec::Vec;

/// `C (+)= op(A) · op(B)` for row-major matrices.
///
/// `A` is `[m, k]` (or `[k, m]` when `trans_a`), `B` is `[k, n]` (or `[n, k]`
/// when `trans_b`), `C` is `[m, n]`. Transposes are expressed as strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    n: usize,
    k: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::sgemm(
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

/// Border handling for "same" convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Out-of-range samples read as zero.
    Zeros,
    /// Mirror about the edge sample without repeating it (`-1 -> 1`).
    Reflect,
}

/// Maps a possibly out-of-range coordinate onto `0..len`, or `None` for a
/// zero-padded sample.
#[inline]
pub(crate) fn pad_index(i: isize, len: usize, padding: Padding) -> Option<usize> {
    if i >= 0 && (i as usize) < len {
        return Some(i as usize);
    }
    match padding {
        Padding::Zeros => None,
        Padding::Reflect => Some(reflect(i, len)),
    }
}

/// Reflects `i` into `0..len` (period `2·len − 2`).
pub(crate) fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= len as isize {
        r = period - r;
    }
    r as usize
}

/// Unfolds `x[c, h, w]` into `[c·kh·kw, h·w]` patches for a stride-1,
/// same-size convolution.
pub(crate) fn im2col(
    x: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    padding: Padding,
) -> Vec<f32> {
    let hw = height * width;
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut col = vec![0.0; channels * kh * kw * hw];
    for c in 0..channels {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * hw;
                let dst = &mut col[row..row + hw];
                let dx = kx as isize - pw;
                for y in 0..height {
                    let Some(sy) = pad_index(y as isize + ky as isize - ph, height, padding) else {
                        continue;
                    };
                    let src = &plane[sy * width..(sy + 1) * width];
                    let out = &mut dst[y * width..(y + 1) * width];
                    let (lo, hi) = interior(dx, width);
                    if lo < hi {
                        out[lo..hi].copy_from_slice(&src[(lo as isize + dx) as usize..(hi as isize + dx) as usize]);
                    }
                    if padding == Padding::Reflect {
                        for xo in (0..lo).chain(hi..width) {
                            out[xo] = src[reflect(xo as isize + dx, width)];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto `dx[c, h, w]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_add(
    col: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    padding: Padding,
    dx: &mut [f32],
) {
    let hw = height * width;
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    for c in 0..channels {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * hw;
                let src = &col[row..row + hw];
                let dxo = kx as isize - pw;
                for y in 0..height {
                    let Some(sy) = pad_index(y as isize + ky as isize - ph, height, padding) else {
                        continue;
                    };
                    let dst = &mut plane[sy * width..(sy + 1) * width];
                    let row = &src[y * width..(y + 1) * width];
                    let (lo, hi) = interior(dxo, width);
                    if lo < hi {
                        let shifted = &mut dst[(lo as isize + dxo) as usize..(hi as isize + dxo) as usize];
                        for (d, &v) in shifted.iter_mut().zip(&row[lo..hi]) {
                            *d += v;
                        }
                    }
                    if padding == Padding::Reflect {
                        for xo in (0..lo).chain(hi..width) {
                            dst[reflect(xo as isize + dxo, width)] += row[xo];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose source `x + dx` lies inside `0..width`.
#[inline]
fn interior(dx: isize, width: usize) -> (usize, usize) {
    let w = width as isize;
    let lo = (-dx).clamp(0, w);
    let hi = (w - dx).clamp(lo, w);
    (lo as usize, hi as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Transposes a row-major `[rows, cols]` matrix.
    fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
        let mut out = vec![0.0; x.len()];
        const BLOCK: usize = 32;
        for r0 in (0..rows).step_by(BLOCK) {
            for c0 in (0..cols).step_by(BLOCK) {
                for r in r0..(r0 + BLOCK).min(rows) {
                    for c in c0..(c0 + BLOCK).min(cols) {
                        out[c * rows + r] = x[r * cols + c];
                    }
                }
            }
        }
        out
    }

    fn naive(m: usize, n: usize, k: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_transpose_variants_agree() {
        let (m, n, k) = (3, 5, 4);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.91).cos()).collect();
        let want = naive(m, n, k, &a, &b);
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; m * n];
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            gemm(m, n, k, aa, ta, bb, tb, &mut c, false);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-5, "{ta} {tb}");
            }
        }
    }

    #[test]
    fn reflect_indexing() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w, k) = (2, 5, 4, 3);
        let x: Vec<f32> = (0..c * h * w).map(|i| (i as f32 * 0.3).sin()).collect();
        let y: Vec<f32> = (0..c * k * k * h * w).map(|i| (i as f32 * 0.7).cos()).collect();
        for pad in [Padding::Zeros, Padding::Reflect] {
            let col = im2col(&x, c, h, w, k, k, pad);
            let lhs: f32 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
            let mut dx = vec![0.0; x.len()];
            col2im_add(&y, c, h, w, k, k, pad, &mut dx);
            let rhs: f32 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-3, "{pad:?}: {lhs} vs {rhs}");
        }
    }
}
