//! Complex multi-echo images and their centered k-space.
//!
//! Transforms are orthonormal (`1/√(HW)` each way) with the DC sample at
//! index `(⌊H/2⌋, ⌊W/2⌋)`. Image index `(0, 0)` is the spatial origin, so a
//! truncated k-space reconstructs samples of the same field of view on a
//! coarser grid that shares that origin.

use alloc::vec::Vec;
use core::f32::consts::PI;

use num_complex::Complex64;
#[allow(unused_imports)] // shadowed by std methods when a dependency links std
use num_traits::Float;

use crate::error::{invalid, Error, Result};
use crate::fft::{fft2, fftshift, ifftshift};
use crate::tensor::Tensor;

/// Wraps an angle into `(−π, π]`.
pub fn wrap_phase(angle: f64) -> f32 {
    let w = angle.sin().atan2(angle.cos());
    clamp_wrapped(w as f32)
}

/// Maps the `f32` rounding of `±π` onto `+π`.
fn clamp_wrapped(w: f32) -> f32 {
    if w <= -PI {
        PI
    } else if w > PI {
        PI
    } else {
        w
    }
}

/// Magnitude/phase image.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexImage {
    height: usize,
    width: usize,
    magnitude: Vec<f32>,
    phase: Vec<f32>,
}

impl ComplexImage {
    /// Validates a nonnegative magnitude and wraps the phase.
    pub fn from_polar(height: usize, width: usize, magnitude: Vec<f32>, phase: Vec<f32>) -> Result<Self> {
        let n = height * width;
        if n == 0 {
            return Err(invalid("image size", "height and width must be positive"));
        }
        if magnitude.len() != n || phase.len() != n {
            return Err(Error::LengthMismatch {
                len: magnitude.len().min(phase.len()),
                shape: alloc::vec![height, width],
            });
        }
        if magnitude.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
            return Err(invalid("magnitude", "must be finite and nonnegative"));
        }
        if phase.iter().any(|p| !p.is_finite()) {
            return Err(invalid("phase", "must be finite"));
        }
        let phase = phase
            .into_iter()
            .map(|p| match p {
                p if p > -PI && p <= PI => p,
                p if p == -PI => PI,
                p => wrap_phase(p as f64),
            })
            .collect();
        Ok(Self {
            height,
            width,
            magnitude,
            phase,
        })
    }

    pub fn from_complex(height: usize, width: usize, values: &[Complex64]) -> Result<Self> {
        if values.len() != height * width || values.is_empty() {
            return Err(Error::LengthMismatch {
                len: values.len(),
                shape: alloc::vec![height, width],
            });
        }
        let magnitude = values.iter().map(|z| z.norm() as f32).collect();
        let phase = values.iter().map(|z| clamp_wrapped(z.im.atan2(z.re) as f32)).collect();
        Ok(Self {
            height,
            width,
            magnitude,
            phase,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn magnitude(&self) -> &[f32] {
        &self.magnitude
    }

    pub fn phase(&self) -> &[f32] {
        &self.phase
    }

    pub fn to_complex(&self) -> Vec<Complex64> {
        self.magnitude
            .iter()
            .zip(&self.phase)
            .map(|(&m, &p)| Complex64::from_polar(m as f64, p as f64))
            .collect()
    }

    pub fn magnitude_tensor(&self) -> Tensor {
        Tensor::from_parts(alloc::vec![self.height, self.width], self.magnitude.clone())
    }

    pub fn phase_tensor(&self) -> Tensor {
        Tensor::from_parts(alloc::vec![self.height, self.width], self.phase.clone())
    }
}

/// Echoes of one acquisition, ordered by echo time.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiEchoVolume {
    echoes: Vec<ComplexImage>,
    echo_times_ms: Vec<f64>,
}

impl MultiEchoVolume {
    pub fn new(echoes: Vec<ComplexImage>, echo_times_ms: Vec<f64>) -> Result<Self> {
        let first = echoes.first().ok_or_else(|| invalid("echoes", "volume needs at least one echo"))?;
        if echoes.len() != echo_times_ms.len() {
            return Err(invalid("echo_times_ms", "one echo time per echo is required"));
        }
        if echoes.iter().any(|e| e.height != first.height || e.width != first.width) {
            return Err(invalid("echoes", "all echoes must share dimensions"));
        }
        if echo_times_ms.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(invalid("echo_times_ms", "echo times must be positive"));
        }
        if echo_times_ms.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("echo_times_ms", "echo times must be strictly increasing"));
        }
        Ok(Self { echoes, echo_times_ms })
    }

    /// Builds a volume from `[E, H, W]` magnitude and phase stacks.
    pub fn from_stacks(magnitude: &Tensor, phase: &Tensor, echo_times_ms: Vec<f64>) -> Result<Self> {
        if magnitude.ndim() != 3 || magnitude.shape() != phase.shape() {
            return Err(Error::ShapeMismatch {
                op: "volume stacks",
                lhs: magnitude.shape().to_vec(),
                rhs: phase.shape().to_vec(),
            });
        }
        let (e, h, w) = (magnitude.shape()[0], magnitude.shape()[1], magnitude.shape()[2]);
        let plane = h * w;
        let echoes = (0..e)
            .map(|i| {
                ComplexImage::from_polar(
                    h,
                    w,
                    magnitude.data()[i * plane..(i + 1) * plane].to_vec(),
                    phase.data()[i * plane..(i + 1) * plane].to_vec(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(echoes, echo_times_ms)
    }

    pub fn echoes(&self) -> &[ComplexImage] {
        &self.echoes
    }

    pub fn echo_times_ms(&self) -> &[f64] {
        &self.echo_times_ms
    }

    pub fn num_echoes(&self) -> usize {
        self.echoes.len()
    }

    pub fn height(&self) -> usize {
        self.echoes[0].height
    }

    pub fn width(&self) -> usize {
        self.echoes[0].width
    }

    /// `[E, H, W]` magnitude stack.
    pub fn magnitude_stack(&self) -> Tensor {
        self.stack(|e| &e.magnitude)
    }

    /// `[E, H, W]` phase stack.
    pub fn phase_stack(&self) -> Tensor {
        self.stack(|e| &e.phase)
    }

    fn stack(&self, field: impl Fn(&ComplexImage) -> &Vec<f32>) -> Tensor {
        let mut data = Vec::with_capacity(self.echoes.len() * self.height() * self.width());
        for e in &self.echoes {
            data.extend_from_slice(field(e));
        }
        Tensor::from_parts(alloc::vec![self.echoes.len(), self.height(), self.width()], data)
    }
}

/// Centered 2-D spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpace {
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl KSpace {
    pub fn new(height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        if height * width == 0 || data.len() != height * width {
            return Err(Error::LengthMismatch {
                len: data.len(),
                shape: alloc::vec![height, width],
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    /// Sample at centered frequency `(ky, kx)` relative to DC.
    pub fn at(&self, ky: isize, kx: isize) -> Option<Complex64> {
        let y = ky + (self.height / 2) as isize;
        let x = kx + (self.width / 2) as isize;
        if y < 0 || x < 0 || y as usize >= self.height || x as usize >= self.width {
            return None;
        }
        Some(self.data[y as usize * self.width + x as usize])
    }
}

/// Orthonormal forward transform with DC centered.
pub fn to_kspace(img: &ComplexImage) -> KSpace {
    let (h, w) = (img.height, img.width);
    let mut data = img.to_complex();
    fft2(&mut data, h, w, false);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    data.iter_mut().for_each(|z| *z *= scale);
    KSpace {
        height: h,
        width: w,
        data: fftshift(&data, h, w),
    }
}

/// Inverse orthonormal transform, split into magnitude and wrapped phase.
pub fn from_kspace(k: &KSpace) -> ComplexImage {
    let (h, w) = (k.height, k.width);
    let mut data = ifftshift(&k.data, h, w);
    fft2(&mut data, h, w, true);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    data.iter_mut().for_each(|z| *z *= scale);
    ComplexImage::from_complex(h, w, &data).expect("dimensions already validated")
}

/// Keeps the `th × tw` block around DC, scaled by `√(th·tw / (H·W))` so a
/// constant image keeps its value after the inverse transform.
pub fn truncate_kspace(k: &KSpace, th: usize, tw: usize) -> Result<KSpace> {
    if th == 0 || tw == 0 || th > k.height || tw > k.width {
        return Err(Error::InvalidShape {
            op: "truncate_kspace",
            shape: alloc::vec![th, tw],
            reason: "target must be positive and no larger than the source",
        });
    }
    let scale = ((th * tw) as f64 / (k.height * k.width) as f64).sqrt();
    let oy = k.height / 2 - th / 2;
    let ox = k.width / 2 - tw / 2;
    let mut data = Vec::with_capacity(th * tw);
    for y in 0..th {
        let row = &k.data[(oy + y) * k.width + ox..][..tw];
        data.extend(row.iter().map(|&z| z * scale));
    }
    Ok(KSpace {
        height: th,
        width: tw,
        data,
    })
}

/// Per-echo k-space truncation to `th × tw`; echo times are kept.
pub fn simulate_lowres(v: &MultiEchoVolume, th: usize, tw: usize) -> Result<MultiEchoVolume> {
    let echoes = v
        .echoes
        .iter()
        .map(|e| truncate_kspace(&to_kspace(e), th, tw).map(|k| from_kspace(&k)))
        .collect::<Result<Vec<_>>>()?;
    MultiEchoVolume::new(echoes, v.echo_times_ms.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use core::f64::consts::PI as PI64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ComplexImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mag = (0..h * w).map(|_| rng.random_range(0.0f32..1.0)).collect();
        let ph = (0..h * w).map(|_| rng.random_range(-3.1f32..3.1)).collect();
        ComplexImage::from_polar(h, w, mag, ph).unwrap()
    }

    /// Brute-force centered orthonormal DFT.
    fn naive_centered_dft(img: &ComplexImage) -> Vec<Complex64> {
        let (h, w) = (img.height(), img.width());
        let z = img.to_complex();
        let mut out = vec![Complex64::new(0.0, 0.0); h * w];
        for ky in 0..h {
            for kx in 0..w {
                let fy = ky as f64 - (h / 2) as f64;
                let fx = kx as f64 - (w / 2) as f64;
                let mut acc = Complex64::new(0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let ang = -2.0 * PI64 * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64);
                        acc += z[y * w + x] * Complex64::from_polar(1.0, ang);
                    }
                }
                out[ky * w + kx] = acc / ((h * w) as f64).sqrt();
            }
        }
        out
    }

    fn max_image_error(a: &ComplexImage, b: &ComplexImage) -> f64 {
        a.to_complex()
            .iter()
            .zip(b.to_complex())
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max)
    }

    #[test]
    fn constant_image_concentrates_at_dc() {
        let (h, w) = (6, 8);
        let img = ComplexImage::from_polar(h, w, vec![0.7; h * w], vec![0.0; h * w]).unwrap();
        let k = to_kspace(&img);
        let dc = 0.7 * ((h * w) as f64).sqrt();
        assert!((k.at(0, 0).unwrap() - Complex64::new(dc, 0.0)).norm() < 1e-5);
        let others = k.data().iter().enumerate().filter(|&(i, _)| i != (h / 2) * w + w / 2);
        for (_, z) in others {
            assert!(z.norm() < 1e-5);
        }
    }

    #[test]
    fn agrees_with_naive_dft() {
        for (n, seed) in [(4, 1), (6, 2), (8, 3), (12, 4)] {
            let img = random_image(n, n, seed);
            let k = to_kspace(&img);
            for (a, b) in k.data().iter().zip(naive_centered_dft(&img)) {
                assert!((a - b).norm() < 1e-4, "n={n}");
            }
        }
        // Non-square as well.
        let img = random_image(6, 8, 9);
        for (a, b) in to_kspace(&img).data().iter().zip(naive_centered_dft(&img)) {
            assert!((a - b).norm() < 1e-4);
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        for (n, seed) in [(16, 5), (12, 6)] {
            let img = random_image(n, n, seed);
            let k = to_kspace(&img);
            assert!(max_image_error(&from_kspace(&k), &img) < 1e-5);
            let e_img: f64 = img.magnitude().iter().map(|&m| (m as f64).powi(2)).sum();
            let e_k: f64 = k.data().iter().map(|z| z.norm_sqr()).sum();
            assert!((e_img.sqrt() - e_k.sqrt()).abs() < 1e-5);
        }
    }

    #[test]
    fn dc_delta_inverts_to_constant() {
        let (h, w) = (8, 6);
        let mut data = vec![Complex64::new(0.0, 0.0); h * w];
        data[(h / 2) * w + w / 2] = Complex64::new(((h * w) as f64).sqrt(), 0.0);
        let img = from_kspace(&KSpace::new(h, w, data).unwrap());
        for (&m, &p) in img.magnitude().iter().zip(img.phase()) {
            assert!((m - 1.0).abs() < 1e-6 && p.abs() < 1e-6);
        }
    }

    #[test]
    fn conjugate_symmetric_kspace_gives_real_image() {
        // Spectrum of a real, positive image is conjugate symmetric.
        let (h, w) = (8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mag = (0..h * w).map(|_| rng.random_range(0.1f32..1.0)).collect();
        let real = ComplexImage::from_polar(h, w, mag, vec![0.0; h * w]).unwrap();
        let k = to_kspace(&real);
        for ky in -3..=3isize {
            for kx in -3..=3isize {
                let a = k.at(ky, kx).unwrap();
                let b = k.at(-ky, -kx).unwrap();
                assert!((a - b.conj()).norm() < 1e-9);
            }
        }
        let back = from_kspace(&k);
        assert!(back.phase().iter().all(|p| p.abs() < 1e-5));
    }

    #[test]
    fn truncation_identity_and_errors() {
        let img = random_image(12, 10, 8);
        let k = to_kspace(&img);
        assert_eq!(truncate_kspace(&k, 12, 10).unwrap(), k);
        assert!(truncate_kspace(&k, 13, 10).is_err());
        assert!(truncate_kspace(&k, 0, 10).is_err());
    }

    #[test]
    fn truncation_preserves_constant_value() {
        for (h, th) in [(16, 8), (15, 10), (24, 16)] {
            let img = ComplexImage::from_polar(h, h, vec![0.42; h * h], vec![0.3; h * h]).unwrap();
            // Brute-force spectrum, crop, invert.
            let spec = naive_centered_dft(&img);
            let k = KSpace::new(h, h, spec).unwrap();
            let low = from_kspace(&truncate_kspace(&k, th, th).unwrap());
            for (&m, &p) in low.magnitude().iter().zip(low.phase()) {
                assert!((m - 0.42).abs() < 1e-4 && (p - 0.3).abs() < 1e-4, "{m} {p}");
            }
        }
    }

    #[test]
    fn simulate_lowres_keeps_echo_layout() {
        let echoes = (0..3).map(|i| random_image(16, 16, 20 + i)).collect();
        let v = MultiEchoVolume::new(echoes, vec![14.0, 27.0, 40.0]).unwrap();
        let low = simulate_lowres(&v, 8, 12).unwrap();
        assert_eq!(low.num_echoes(), 3);
        assert_eq!((low.height(), low.width()), (8, 12));
        assert_eq!(low.echo_times_ms(), v.echo_times_ms());
        let same = simulate_lowres(&v, 16, 16).unwrap();
        for (a, b) in same.echoes().iter().zip(v.echoes()) {
            assert!(max_image_error(a, b) < 1e-5);
        }
    }

    #[test]
    fn volume_validation() {
        let a = random_image(4, 4, 1);
        let b = random_image(4, 5, 2);
        assert!(MultiEchoVolume::new(vec![a.clone(), b], vec![1.0, 2.0]).is_err());
        assert!(MultiEchoVolume::new(vec![a.clone(), a.clone()], vec![2.0, 2.0]).is_err());
        assert!(MultiEchoVolume::new(vec![a.clone()], vec![-1.0]).is_err());
        assert!(MultiEchoVolume::new(vec![], vec![]).is_err());
        assert!(ComplexImage::from_polar(1, 2, vec![-0.1, 0.0], vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn phase_is_wrapped() {
        let img = ComplexImage::from_polar(1, 4, vec![1.0; 4], vec![-PI, 4.0, -7.0, PI]).unwrap();
        for &p in img.phase() {
            assert!(p > -PI && p <= PI);
        }
        assert_eq!(img.phase()[0], PI);
    }
}
