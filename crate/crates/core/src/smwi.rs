//! Susceptibility map-weighted imaging from multi-echo complex data.
//!
//! A simplified SWI-style pipeline: per echo, a homodyne high-pass
//! (`arg(z / lowpass(z))` with a separable Hann low-pass) gives local phase;
//! a linear paramagnetic mask maps positive phase to weights in `[0, 1]`;
//! per-echo masks are averaged, raised to a power, and multiplied onto the
//! echo-combined magnitude. This is a phase-mask reconstruction, not a
//! susceptibility (QSM) inversion.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
#[allow(unused_imports)] // shadowed by std methods when a dependency links std
use num_traits::Float;

use crate::error::{invalid, Error, Result};
use crate::mri::{wrap_phase, ComplexImage, MultiEchoVolume};
use crate::tensor::Tensor;

/// How echo magnitudes are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EchoCombine {
    /// Mean of magnitudes.
    Average,
    /// `√(Σ mag² / E)`.
    Rss,
}

impl core::str::FromStr for EchoCombine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "average" => Ok(Self::Average),
            "rss" => Ok(Self::Rss),
            other => Err(Error::BadValue {
                key: "smwi.combine".into(),
                value: other.into(),
            }),
        }
    }
}

impl core::fmt::Display for EchoCombine {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Self::Average => "average",
            Self::Rss => "rss",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmwiParams {
    /// Odd side length of the Hann low-pass window.
    pub highpass_kernel: usize,
    /// Phase (rad) at which the mask reaches 0.
    pub phase_cutoff: f64,
    pub mask_power: u32,
    pub echo_combine: EchoCombine,
    /// Treat negative filtered phase as paramagnetic instead of positive.
    pub negative_phase: bool,
}

impl Default for SmwiParams {
    fn default() -> Self {
        Self {
            highpass_kernel: 33,
            phase_cutoff: PI / 2.0,
            mask_power: 4,
            echo_combine: EchoCombine::Average,
            negative_phase: false,
        }
    }
}

impl SmwiParams {
    pub fn validate(&self) -> Result<()> {
        validate_kernel(self.highpass_kernel)?;
        if !(self.phase_cutoff > 0.0 && self.phase_cutoff <= PI) {
            return Err(invalid("smwi.cutoff", "must lie in (0, π]"));
        }
        if self.mask_power == 0 {
            return Err(invalid("smwi.power", "must be at least 1"));
        }
        Ok(())
    }
}

fn validate_kernel(k: usize) -> Result<()> {
    if k < 3 || k % 2 == 0 {
        return Err(invalid("smwi.kernel", alloc::format!("{k} must be odd and at least 3")));
    }
    Ok(())
}

/// Reconstructed image plus the parameters that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SmwiImage {
    /// `[H, W]`, nonnegative.
    pub image: Tensor,
    pub params: SmwiParams,
}

/// Hann taps `0.5 − 0.5·cos(2π(i+1)/(k+1))`, nonzero at both ends.
pub fn hann_window(k: usize) -> Vec<f64> {
    (0..k).map(|i| 0.5 - 0.5 * (2.0 * PI * (i + 1) as f64 / (k + 1) as f64).cos()).collect()
}

/// Separable zero-padded low-pass of a complex plane.
fn lowpass(z: &[Complex64], h: usize, w: usize, taps: &[f64]) -> Vec<Complex64> {
    let r = taps.len() / 2;
    let zero = Complex64::new(0.0, 0.0);
    let mut rows = vec![zero; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            let mut acc = zero;
            for xx in lo..=hi {
                acc += z[y * w + xx] * taps[xx + r - x];
            }
            rows[y * w + x] = acc;
        }
    }
    let mut out = vec![zero; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            let mut acc = zero;
            for yy in lo..=hi {
                acc += rows[yy * w + x] * taps[yy + r - y];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Homodyne high-pass phase `arg(z · conj(lowpass(z)))`, wrapped to
/// `(−π, π]`. Pixels where `z` or its low-pass vanish get phase 0.
pub fn highpass_phase(img: &ComplexImage, kernel: usize) -> Result<Tensor> {
    validate_kernel(kernel)?;
    let (h, w) = (img.height(), img.width());
    let z = img.to_complex();
    let lp = lowpass(&z, h, w, &hann_window(kernel));
    let data = z
        .iter()
        .zip(&lp)
        .map(|(&a, &l)| {
            if a == Complex64::new(0.0, 0.0) || l == Complex64::new(0.0, 0.0) {
                0.0
            } else {
                wrap_phase((a * l.conj()).arg())
            }
        })
        .collect();
    Tensor::new(&[h, w], data)
}

/// Linear paramagnetic mask: `clamp(1 − φ/φc, 0, 1)` for `φ > 0`, else 1.
pub fn compute_mask(phase_hp: &Tensor, cutoff: f64) -> Tensor {
    phase_hp.map(|p| mask_value(p, cutoff))
}

fn mask_value(p: f32, cutoff: f64) -> f32 {
    if p > 0.0 {
        (1.0 - p as f64 / cutoff).clamp(0.0, 1.0) as f32
    } else {
        1.0
    }
}

/// Echo-combined magnitude `[H, W]`.
pub fn combine_echoes(v: &MultiEchoVolume, mode: EchoCombine) -> Tensor {
    let (h, w) = (v.height(), v.width());
    let e = v.num_echoes() as f64;
    Tensor::from_fn(&[h, w], |i| {
        let mags = v.echoes().iter().map(|im| im.magnitude()[i] as f64);
        match mode {
            EchoCombine::Average => (mags.sum::<f64>() / e) as f32,
            EchoCombine::Rss => (mags.map(|m| m * m).sum::<f64>() / e).sqrt() as f32,
        }
    })
}

/// `combined ⊙ mean(masks)ⁿ` from precomputed per-echo filtered phases.
pub fn weight_image(combined: &Tensor, phases_hp: &[Tensor], p: &SmwiParams) -> Result<Tensor> {
    p.validate()?;
    if phases_hp.is_empty() {
        return Err(invalid("phases", "at least one echo is required"));
    }
    for ph in phases_hp {
        if ph.shape() != combined.shape() {
            return Err(Error::ShapeMismatch {
                op: "weight_image",
                lhs: combined.shape().to_vec(),
                rhs: ph.shape().to_vec(),
            });
        }
    }
    let sign = if p.negative_phase { -1.0 } else { 1.0 };
    let e = phases_hp.len() as f64;
    Ok(Tensor::from_fn(combined.shape(), |i| {
        let m: f64 = phases_hp
            .iter()
            .map(|ph| mask_value(sign * ph.data()[i], p.phase_cutoff) as f64)
            .sum::<f64>()
            / e;
        (combined.data()[i] as f64 * m.powi(p.mask_power as i32)) as f32
    }))
}

pub fn reconstruct_smwi(v: &MultiEchoVolume, p: &SmwiParams) -> Result<SmwiImage> {
    p.validate()?;
    let phases = v
        .echoes()
        .iter()
        .map(|e| highpass_phase(e, p.highpass_kernel))
        .collect::<Result<Vec<_>>>()?;
    let combined = combine_echoes(v, p.echo_combine);
    Ok(SmwiImage {
        image: weight_image(&combined, &phases, p)?,
        params: *p,
    })
}
