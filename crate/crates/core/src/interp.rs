//! Bicubic resampling on the periodic pixel grid.
//!
//! Output pixel `i` samples the source at `i · src/dst`, so index 0 stays the
//! spatial origin, matching the k-space truncation grid where the low- and
//! high-resolution images share their first sample. Borders wrap
//! periodically, again like the DFT. The kernel is Keys' cubic with
//! `a = −0.5`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};

const A: f64 = -0.5;

fn keys(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Per output index: four source indices and their weights.
fn taps(src: usize, dst: usize) -> Vec<([usize; 4], [f64; 4])> {
    (0..dst)
        .map(|i| {
            // Exact rational position keeps integer hits exact.
            let num = i * src;
            let base = num / dst;
            let frac = (num % dst) as f64 / dst as f64;
            let mut idx = [0; 4];
            let mut w = [0.0; 4];
            for k in 0..4 {
                let off = k as isize - 1;
                idx[k] = (base as isize + off).rem_euclid(src as isize) as usize;
                w[k] = keys(frac - off as f64);
            }
            (idx, w)
        })
        .collect()
}

/// Resamples a row-major `sh × sw` plane to `dh × dw`.
pub fn resize(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Result<Vec<f32>> {
    if src.len() != sh * sw || sh == 0 || sw == 0 {
        return Err(invalid("bicubic source", "length does not match positive dimensions"));
    }
    if dh == 0 || dw == 0 {
        return Err(invalid("bicubic target", "dimensions must be positive"));
    }
    if (sh, sw) == (dh, dw) {
        return Ok(src.to_vec());
    }
    let col_taps = taps(sw, dw);
    let row_taps = taps(sh, dh);
    // Horizontal pass in f64, then vertical.
    let mut rows = vec![0.0f64; sh * dw];
    for y in 0..sh {
        let line = &src[y * sw..(y + 1) * sw];
        for (x, (idx, w)) in col_taps.iter().enumerate() {
            rows[y * dw + x] = (0..4).map(|k| line[idx[k]] as f64 * w[k]).sum();
        }
    }
    let mut out = vec![0.0f32; dh * dw];
    for (y, (idx, w)) in row_taps.iter().enumerate() {
        for x in 0..dw {
            let v: f64 = (0..4).map(|k| rows[idx[k] * dw + x] * w[k]).sum();
            out[y * dw + x] = v as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_partition_of_unity() {
        for i in 0..=20 {
            let f = i as f64 / 20.0;
            let s: f64 = (-1..3).map(|k| keys(f - k as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(keys(0.0), 1.0);
        assert_eq!(keys(1.0), 0.0);
        assert_eq!(keys(2.0), 0.0);
    }

    #[test]
    fn same_size_is_identity_and_constants_survive() {
        let src: Vec<f32> = (0..12).map(|v| v as f32).collect();
        assert_eq!(resize(&src, 3, 4, 3, 4).unwrap(), src);
        let c = vec![0.7f32; 64 * 64];
        for v in resize(&c, 64, 64, 96, 96).unwrap() {
            assert!((v - 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn coincident_samples_are_kept() {
        // 2× upsampling: even outputs sit on source pixels.
        let src: Vec<f32> = (0..16).map(|v| ((v * 7) % 5) as f32).collect();
        let out = resize(&src, 4, 4, 8, 8).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(out[2 * y * 8 + 2 * x], src[y * 4 + x]);
            }
        }
    }

    #[test]
    fn periodic_sinusoid_is_tracked() {
        let (n, m) = (32, 48);
        let f = |x: f64| (2.0 * core::f64::consts::PI * x / 32.0).cos();
        let src: Vec<f32> = (0..n * n).map(|i| f((i % n) as f64) as f32).collect();
        let out = resize(&src, n, n, m, m).unwrap();
        for (i, &v) in out.iter().enumerate() {
            let x = (i % m) as f64 * n as f64 / m as f64;
            assert!((v as f64 - f(x)).abs() < 2e-3);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(resize(&[1.0; 5], 2, 3, 4, 4).is_err());
        assert!(resize(&[1.0; 6], 2, 3, 0, 4).is_err());
    }
}
