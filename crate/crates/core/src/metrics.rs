//! Image similarity metrics and mean ± std aggregation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by std methods when a dependency links std
use num_traits::Float;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if a.numel() == 0 {
        return Err(invalid("image", "must not be empty"));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair("mse", a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(s / a.numel() as f64)
}

pub fn mae(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair("mae", a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum();
    Ok(s / a.numel() as f64)
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// `max − min` of the reference, or 1 for a constant image.
pub fn dynamic_range(reference: &Tensor) -> f64 {
    let (lo, hi) = reference
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
    if hi > lo {
        hi - lo
    } else {
        1.0
    }
}

/// Valid-region Gaussian filter of an `[H, W]` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = taps.iter().enumerate().map(|(j, t)| t * x[y * w + x0 + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = taps.iter().enumerate().map(|(j, t)| t * rows[(y0 + j) * ow + x0]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained 11×11 Gaussian windows.
pub fn ssim(a: &Tensor, b: &Tensor, dynamic_range: f64) -> Result<f64> {
    check_pair("ssim", a, b)?;
    if a.ndim() != 2 {
        return Err(Error::InvalidShape {
            op: "ssim",
            shape: a.shape().to_vec(),
            reason: "expected [H, W]",
        });
    }
    let (h, w) = (a.shape()[0], a.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidShape {
            op: "ssim",
            shape: a.shape().to_vec(),
            reason: "image smaller than the 11×11 window",
        });
    }
    if !(dynamic_range > 0.0 && dynamic_range.is_finite()) {
        return Err(invalid("dynamic_range", "must be positive and finite"));
    }
    let x: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &taps));
    let c1 = (SSIM_K1 * dynamic_range).powi(2);
    let c2 = (SSIM_K2 * dynamic_range).powi(2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Per-scan values with their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metric: String,
    /// One id per value (scan file name or index).
    pub ids: Vec<String>,
    pub values: Vec<f64>,
    pub mean: f64,
    /// `n − 1` denominator; 0 for a single value.
    pub std: f64,
}

/// Mean and sample std; a single value has std 0.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(invalid("values", "cannot aggregate an empty list"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

pub fn aggregate(metric: &str, ids: Vec<String>, values: Vec<f64>) -> Result<MetricReport> {
    if ids.len() != values.len() {
        return Err(invalid("ids", format!("{} ids for {} values", ids.len(), values.len())));
    }
    let (mean, std) = mean_std(&values)?;
    Ok(MetricReport {
        metric: metric.into(),
        ids,
        values,
        mean,
        std,
    })
}

impl MetricReport {
    /// `"{mean} ± {std}"` after multiplying both by `scale`.
    pub fn summary(&self, scale: f64, decimals: usize) -> String {
        format!("{:.*} ± {:.*}", decimals, self.mean * scale, decimals, self.std * scale)
    }
}
