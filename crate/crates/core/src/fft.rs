//! Arbitrary-length complex FFT.
//!
//! Lengths whose prime factors are all ≤ 31 use recursive mixed-radix
//! Cooley–Tukey; anything else goes through Bluestein's chirp-z transform on
//! a power-of-two grid. Transforms are unnormalized; callers scale.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
#[allow(unused_imports)] // shadowed by std methods when a dependency links std
use num_traits::Float;

const MAX_DIRECT_RADIX: usize = 31;

/// Precomputed plan for one length and direction.
#[derive(Debug, Clone)]
pub struct FftPlan {
    n: usize,
    inverse: bool,
    kind: PlanKind,
}

#[derive(Debug, Clone)]
enum PlanKind {
    MixedRadix {
        factors: Vec<usize>,
        twiddles: Vec<Complex64>,
    },
    Bluestein {
        chirp: Vec<Complex64>,
        kernel_spectrum: Vec<Complex64>,
        inner_forward: alloc::boxed::Box<FftPlan>,
        inner_inverse: alloc::boxed::Box<FftPlan>,
    },
}

fn factorize(mut n: usize) -> Vec<usize> {
    let mut f = Vec::new();
    while n % 4 == 0 {
        f.push(4);
        n /= 4;
    }
    let mut p = 2;
    while p * p <= n {
        while n % p == 0 {
            f.push(p);
            n /= p;
        }
        p += 1;
    }
    if n > 1 {
        f.push(n);
    }
    f
}

fn unit(angle: f64) -> Complex64 {
    Complex64::new(angle.cos(), angle.sin())
}

impl FftPlan {
    pub fn new(n: usize, inverse: bool) -> Self {
        assert!(n > 0, "FFT length must be positive");
        let sign = if inverse { 1.0 } else { -1.0 };
        let factors = factorize(n);
        if factors.iter().all(|&p| p <= MAX_DIRECT_RADIX || p == 4) {
            let twiddles = (0..n).map(|k| unit(sign * 2.0 * PI * k as f64 / n as f64)).collect();
            return Self {
                n,
                inverse,
                kind: PlanKind::MixedRadix { factors, twiddles },
            };
        }
        // Bluestein: x_k w_k convolved with conj chirp, w_k = e^{sign·iπk²/n}.
        let m = (2 * n - 1).next_power_of_two();
        let chirp: Vec<Complex64> = (0..n)
            .map(|k| {
                // k² mod 2n keeps the angle argument small.
                let k2 = (k as u128 * k as u128 % (2 * n as u128)) as f64;
                unit(sign * PI * k2 / n as f64)
            })
            .collect();
        let mut kernel = vec![Complex64::new(0.0, 0.0); m];
        kernel[0] = chirp[0].conj();
        for k in 1..n {
            kernel[k] = chirp[k].conj();
            kernel[m - k] = chirp[k].conj();
        }
        let inner_forward = FftPlan::new(m, false);
        let inner_inverse = FftPlan::new(m, true);
        inner_forward.process(&mut kernel);
        Self {
            n,
            inverse,
            kind: PlanKind::Bluestein {
                chirp,
                kernel_spectrum: kernel,
                inner_forward: alloc::boxed::Box::new(inner_forward),
                inner_inverse: alloc::boxed::Box::new(inner_inverse),
            },
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn is_inverse(&self) -> bool {
        self.inverse
    }

    /// Transforms `data` in place (unnormalized).
    pub fn process(&self, data: &mut [Complex64]) {
        assert_eq!(data.len(), self.n, "buffer length does not match plan");
        match &self.kind {
            PlanKind::MixedRadix { factors, twiddles } => {
                let input = data.to_vec();
                mixed_radix(&input, 1, data, self.n, factors, twiddles, 1);
            }
            PlanKind::Bluestein {
                chirp,
                kernel_spectrum,
                inner_forward,
                inner_inverse,
            } => {
                let m = kernel_spectrum.len();
                let mut buf = vec![Complex64::new(0.0, 0.0); m];
                for (b, (&x, &w)) in buf.iter_mut().zip(data.iter().zip(chirp)) {
                    *b = x * w;
                }
                inner_forward.process(&mut buf);
                for (b, &k) in buf.iter_mut().zip(kernel_spectrum) {
                    *b *= k;
                }
                inner_inverse.process(&mut buf);
                let scale = 1.0 / m as f64;
                for (d, (&b, &w)) in data.iter_mut().zip(buf.iter().zip(chirp)) {
                    *d = b * w * scale;
                }
            }
        }
    }
}

/// Decimation-in-time step: `out[0..n]` receives the DFT of
/// `input[0], input[stride], …`. `tw_step` maps this level's roots of unity
/// onto the full-length twiddle table.
fn mixed_radix(
    input: &[Complex64],
    stride: usize,
    out: &mut [Complex64],
    n: usize,
    factors: &[usize],
    twiddles: &[Complex64],
    tw_step: usize,
) {
    if n == 1 {
        out[0] = input[0];
        return;
    }
    let p = factors[0];
    let m = n / p;
    for q in 0..p {
        mixed_radix(
            &input[q * stride..],
            stride * p,
            &mut out[q * m..(q + 1) * m],
            m,
            &factors[1..],
            twiddles,
            tw_step * p,
        );
    }
    let full = twiddles.len();
    let mut scratch = vec![Complex64::new(0.0, 0.0); p];
    for k in 0..m {
        // Twiddled sub-transform values y_q[k]·ω_n^{qk}.
        for (q, s) in scratch.iter_mut().enumerate() {
            *s = out[q * m + k] * twiddles[(q * k * tw_step) % full];
        }
        match p {
            2 => {
                let (a, b) = (scratch[0], scratch[1]);
                out[k] = a + b;
                out[k + m] = a - b;
            }
            4 => {
                // ω_4 is -i forward, +i inverse: read it off the table.
                let w = twiddles[(m * tw_step) % full];
                let (a, b, c, d) = (scratch[0], scratch[1], scratch[2], scratch[3]);
                let (s0, s1) = (a + c, a - c);
                let (t0, t1) = (b + d, (b - d) * w);
                out[k] = s0 + t0;
                out[k + m] = s1 + t1;
                out[k + 2 * m] = s0 - t0;
                out[k + 3 * m] = s1 - t1;
            }
            _ => {
                for s in 0..p {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for (q, &v) in scratch.iter().enumerate() {
                        acc += v * twiddles[(q * s * m * tw_step) % full];
                    }
                    out[k + s * m] = acc;
                }
            }
        }
    }
}

/// Unnormalized 2-D transform of a row-major `height × width` buffer.
pub fn fft2(data: &mut [Complex64], height: usize, width: usize, inverse: bool) {
    assert_eq!(data.len(), height * width);
    let row_plan = FftPlan::new(width, inverse);
    for row in data.chunks_exact_mut(width) {
        row_plan.process(row);
    }
    let col_plan = FftPlan::new(height, inverse);
    let mut col = vec![Complex64::new(0.0, 0.0); height];
    for x in 0..width {
        for (y, c) in col.iter_mut().enumerate() {
            *c = data[y * width + x];
        }
        col_plan.process(&mut col);
        for (y, c) in col.iter().enumerate() {
            data[y * width + x] = *c;
        }
    }
}

/// Moves the zero-frequency sample of each axis to index `⌊n/2⌋`.
pub fn fftshift<T: Copy>(data: &[T], height: usize, width: usize) -> Vec<T> {
    shift(data, height, width, height / 2, width / 2)
}

/// Inverse of [`fftshift`].
pub fn ifftshift<T: Copy>(data: &[T], height: usize, width: usize) -> Vec<T> {
    shift(data, height, width, height - height / 2, width - width / 2)
}

fn shift<T: Copy>(data: &[T], height: usize, width: usize, dy: usize, dx: usize) -> Vec<T> {
    let mut out = data.to_vec();
    for y in 0..height {
        let ty = (y + dy) % height;
        for x in 0..width {
            out[ty * width + (x + dx) % width] = data[y * width + x];
        }
    }
    out
}
