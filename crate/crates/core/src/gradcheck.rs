//! Central finite-difference gradient checking.
//!
//! The checked function maps leaf tensors to an output `Var` of any shape.
//! Both routes reduce it with the same fixed random weights `r`:
//! `L = Σ rᵢ·outᵢ`. The tape route differentiates that through
//! [`Tape::backward`]; the numeric route only re-runs the forward pass on a
//! non-recording tape and accumulates `L` in `f64`.
//!
//! The reported error for a leaf is
//! `max |g_tape − g_fd| / max(‖g_tape‖∞, ‖g_fd‖∞, 1)`, with both norms taken
//! over the whole gradient (every leaf), i.e. the worst probe error relative
//! to the scale of the full gradient vector. The unit floor keeps
//! identically-zero gradients from being judged on `f32` rounding noise
//! alone, and the global scale keeps leaves with tiny gradients (a bias in
//! front of a normalization, a position-bias table) from being judged on
//! the absolute noise of an `f32` forward pass with hundreds of outputs.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Finite-difference step.
pub const EPSILON: f32 = 1e-3;
/// Acceptance threshold on the relative error.
pub const TOLERANCE: f32 = 1e-3;

const SCALE_FLOOR: f64 = 1.0;

/// Outcome for one leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafCheck {
    pub probes: usize,
    pub max_abs_error: f64,
    pub rel_error: f64,
}

/// Outcome over all leaves of one function.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub leaves: Vec<LeafCheck>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.leaves.iter().map(|l| l.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < TOLERANCE as f64
    }
}

/// How many entries of each leaf to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Probes {
    All,
    /// At most this many entries per leaf, chosen with a seeded RNG.
    Sample(usize),
}

/// Compares tape gradients of `f` against central differences at `inputs`.
pub fn check<F>(inputs: &[Tensor], probes: Probes, seed: u64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Output shape fixes the reduction weights.
    let out_len = {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&mut tape, &vars)?.value().numel()
    };
    let weights: Vec<f32> = (0..out_len).map(|_| rng.random_range(-1.0f32..1.0)).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let w = tape.constant(Tensor::from_parts(out.shape().to_vec(), weights.clone()));
    let weighted = tape.mul(&out, &w)?;
    let loss = tape.sum(&weighted);
    tape.backward(&loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| tape.grad(v)).collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(out
            .value()
            .data()
            .iter()
            .zip(&weights)
            .map(|(&o, &r)| o as f64 * r as f64)
            .sum())
    };

    let mut raw = Vec::with_capacity(inputs.len());
    let mut scale = SCALE_FLOOR;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (li, grad) in analytic.iter().enumerate() {
        let n = inputs[li].numel();
        let indices: Vec<usize> = match probes {
            Probes::Sample(k) if k < n => (0..k).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        let mut max_abs = 0.0f64;
        let mut g_scale = 0.0f64;
        let mut n_scale = 0.0f64;
        for &i in &indices {
            let x = inputs[li].data()[i];
            let (xp, xm) = (x + EPSILON, x - EPSILON);
            work[li].data_mut()[i] = xp;
            let fp = eval(&work)?;
            work[li].data_mut()[i] = xm;
            let fm = eval(&work)?;
            work[li].data_mut()[i] = x;
            let numeric = (fp - fm) / (xp as f64 - xm as f64);
            let tape_g = grad.data()[i] as f64;
            max_abs = max_abs.max((numeric - tape_g).abs());
            n_scale = n_scale.max(numeric.abs());
            g_scale = g_scale.max(tape_g.abs());
        }
        // The tape gradient is available everywhere; use its full scale.
        for &v in grad.data() {
            g_scale = g_scale.max((v as f64).abs());
        }
        scale = scale.max(g_scale).max(n_scale);
        raw.push((indices.len(), max_abs));
    }
    let leaves = raw
        .into_iter()
        .map(|(probes, max_abs_error)| LeafCheck {
            probes,
            max_abs_error,
            rel_error: max_abs_error / scale,
        })
        .collect();
    Ok(GradCheck { leaves })
}

/// Uniform random tensor in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
}
