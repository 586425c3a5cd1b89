//! Loss, Adam and the single training step.
//!
//! Training pairs live on the high-resolution grid: the network input is the
//! bicubic upsample of the truncated volume ([`crate::model::preprocess`]) and
//! the target is the fully sampled volume, encoded the same way. Patches are
//! cropped at identical positions from both.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

#[allow(unused_imports)] // shadowed by std methods when a dependency links std
use num_traits::Float;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::model::{forward, preprocess, CstnConfig, CstnWeights};
use crate::mri::MultiEchoVolume;
use crate::tensor::Tensor;

/// Optimizer and run settings. None of these values come from a published
/// recipe; they are desk-scale defaults.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub lambda_mag: f64,
    pub lambda_phase: f64,
    pub seed: u64,
    /// Validation and checkpoint interval in steps.
    pub checkpoint_every: usize,
    /// Side of the square training crops on the high-resolution grid.
    pub patch_size: usize,
    pub train_phantoms: usize,
    pub val_phantoms: usize,
    /// Side of the fully sampled phantoms.
    pub phantom_size: usize,
    /// Side of the truncated k-space used as network input.
    pub lowres_size: usize,
    /// Minimum fraction of nonzero ground-truth magnitude in a training
    /// crop; crops are redrawn (up to a fixed number of tries) below it.
    pub foreground: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            total_steps: 5000,
            lambda_mag: 1.0,
            lambda_phase: 1.0,
            seed: 0,
            checkpoint_every: 250,
            patch_size: 96,
            train_phantoms: 64,
            val_phantoms: 10,
            phantom_size: 384,
            lowres_size: 256,
            foreground: 0.5,
        }
    }
}

pub const TRAIN_KEYS: [&str; 16] = [
    "train.learning_rate",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.batch_size",
    "train.total_steps",
    "train.lambda_mag",
    "train.lambda_phase",
    "train.seed",
    "train.checkpoint_every",
    "train.patch_size",
    "train.train_phantoms",
    "train.val_phantoms",
    "train.phantom_size",
    "train.lowres_size",
    "train.foreground",
];

fn parse<T: core::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("learning_rate", self.learning_rate),
            ("eps", self.eps),
            ("lambda_mag", self.lambda_mag + self.lambda_phase),
        ];
        for (name, v) in reals {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid("train config", format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.foreground) {
            return Err(invalid("train config", "foreground must lie in [0, 1]"));
        }
        if self.lambda_mag < 0.0 || self.lambda_phase < 0.0 {
            return Err(invalid("train config", "loss weights must be nonnegative"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid("train config", format!("{name} must lie in [0, 1)")));
            }
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("checkpoint_every", self.checkpoint_every),
            ("patch_size", self.patch_size),
            ("train_phantoms", self.train_phantoms),
            ("val_phantoms", self.val_phantoms),
            ("lowres_size", self.lowres_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(invalid("train config", format!("{name} must be positive")));
            }
        }
        if self.patch_size > self.phantom_size || self.lowres_size > self.phantom_size {
            return Err(invalid("train config", "patch and low-res sizes cannot exceed phantom_size"));
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let values = [
            format!("{}", self.learning_rate),
            format!("{}", self.beta1),
            format!("{}", self.beta2),
            format!("{}", self.eps),
            self.batch_size.to_string(),
            self.total_steps.to_string(),
            format!("{}", self.lambda_mag),
            format!("{}", self.lambda_phase),
            self.seed.to_string(),
            self.checkpoint_every.to_string(),
            self.patch_size.to_string(),
            self.train_phantoms.to_string(),
            self.val_phantoms.to_string(),
            self.phantom_size.to_string(),
            self.lowres_size.to_string(),
            format!("{}", self.foreground),
        ];
        TRAIN_KEYS.iter().zip(values).map(|(k, v)| (*k, v)).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "train.learning_rate" => self.learning_rate = parse(key, value)?,
            "train.beta1" => self.beta1 = parse(key, value)?,
            "train.beta2" => self.beta2 = parse(key, value)?,
            "train.eps" => self.eps = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.total_steps" => self.total_steps = parse(key, value)?,
            "train.lambda_mag" => self.lambda_mag = parse(key, value)?,
            "train.lambda_phase" => self.lambda_phase = parse(key, value)?,
            "train.seed" => self.seed = parse(key, value)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "train.patch_size" => self.patch_size = parse(key, value)?,
            "train.train_phantoms" => self.train_phantoms = parse(key, value)?,
            "train.val_phantoms" => self.val_phantoms = parse(key, value)?,
            "train.phantom_size" => self.phantom_size = parse(key, value)?,
            "train.lowres_size" => self.lowres_size = parse(key, value)?,
            "train.foreground" => self.foreground = parse(key, value)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Step-decayed rate: halved from 50% of the run, quartered from 75%.
    pub fn lr_at(&self, step: usize) -> f64 {
        let n = self.total_steps;
        if 4 * step >= 3 * n && n > 0 {
            self.learning_rate / 4.0
        } else if 2 * step >= n && n > 0 {
            self.learning_rate / 2.0
        } else {
            self.learning_rate
        }
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, hp: AdamParams, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(invalid(
            "adam",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j] as f64;
            let mj = hp.beta1 * m[j] as f64 + (1.0 - hp.beta1) * gj;
            let vj = hp.beta2 * v[j] as f64 + (1.0 - hp.beta2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + hp.eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

/// `λm·mean|m̂ − m| + λp·mean|ĉ − c|` over magnitude and cos/sin channels.
pub fn l1_loss(
    tape: &mut Tape,
    pred_mag: &Var,
    pred_phase: &Var,
    gt_mag: &Var,
    gt_phase: &Var,
    lambda_mag: f64,
    lambda_phase: f64,
) -> Result<Var> {
    let dm = tape.sub(pred_mag, gt_mag)?;
    let am = tape.abs(&dm);
    let lm = tape.mean(&am);
    let dp = tape.sub(pred_phase, gt_phase)?;
    let ap = tape.abs(&dp);
    let lp = tape.mean(&ap);
    let a = tape.mul_scalar(&lm, lambda_mag as f32);
    let b = tape.mul_scalar(&lp, lambda_phase as f32);
    tape.add(&a, &b)
}

/// Loss of a prediction against a ground-truth volume.
pub fn loss(
    pred_mag: &Tensor,
    pred_phase: &Tensor,
    gt: &MultiEchoVolume,
    lambda_mag: f64,
    lambda_phase: f64,
) -> Result<f32> {
    let (gm, gp) = preprocess(gt, (gt.height(), gt.width()))?;
    let mut tape = Tape::inference();
    let vars = [pred_mag, pred_phase, &gm, &gp].map(|t| tape.constant(t.clone()));
    let l = l1_loss(&mut tape, &vars[0], &vars[1], &vars[2], &vars[3], lambda_mag, lambda_phase)?;
    Ok(l.value().data()[0])
}

/// Network input and target on the same high-resolution grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    /// `[1, E, H, W]`
    pub mag_in: Tensor,
    /// `[1, 2E, H, W]`
    pub phase_in: Tensor,
    pub mag_gt: Tensor,
    pub phase_gt: Tensor,
}

impl TrainPair {
    pub fn new(lowres: &MultiEchoVolume, hires: &MultiEchoVolume) -> Result<Self> {
        let size = (hires.height(), hires.width());
        let (mag_in, phase_in) = preprocess(lowres, size)?;
        let (mag_gt, phase_gt) = preprocess(hires, size)?;
        Ok(Self {
            mag_in,
            phase_in,
            mag_gt,
            phase_gt,
        })
    }

    pub fn height(&self) -> usize {
        self.mag_in.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.mag_in.shape()[3]
    }

    /// Square crop of side `size` with top-left corner `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, size: usize) -> Result<TrainPair> {
        Ok(TrainPair {
            mag_in: crop(&self.mag_in, y, x, size)?,
            phase_in: crop(&self.phase_in, y, x, size)?,
            mag_gt: crop(&self.mag_gt, y, x, size)?,
            phase_gt: crop(&self.phase_gt, y, x, size)?,
        })
    }

    /// Fraction of pixels whose first-echo ground-truth magnitude is nonzero.
    pub fn foreground_fraction(&self) -> f64 {
        let s = self.mag_gt.shape();
        let plane = s[2] * s[3];
        let echoes = s[1];
        let mut hit = 0usize;
        for n in 0..s[0] {
            let base = n * echoes * plane;
            hit += self.mag_gt.data()[base..base + plane].iter().filter(|&&v| v != 0.0).count();
        }
        hit as f64 / (s[0] * plane) as f64
    }

    /// Crop at a uniformly random position.
    pub fn random_crop(&self, size: usize, rng: &mut impl Rng) -> Result<TrainPair> {
        if size > self.height() || size > self.width() {
            return Err(invalid("patch_size", format!("{size} exceeds the {}×{} image", self.height(), self.width())));
        }
        let y = rng.random_range(0..=self.height() - size);
        let x = rng.random_range(0..=self.width() - size);
        self.crop(y, x, size)
    }
}

fn crop(t: &Tensor, y: usize, x: usize, size: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 4 || y + size > s[2] || x + size > s[3] {
        return Err(Error::InvalidShape {
            op: "crop",
            shape: s.to_vec(),
            reason: "crop window outside [N, C, H, W] image",
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(n * c * size * size);
    for plane in 0..n * c {
        for r in 0..size {
            let start = plane * h * w + (y + r) * w + x;
            out.extend_from_slice(&t.data()[start..start + size]);
        }
    }
    Tensor::new(&[n, c, size, size], out)
}

fn concat_batch(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| invalid("batch", "empty batch"))?;
    let mut shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.numel() * parts.len());
    for p in parts {
        if p.shape()[1..] != shape[1..] {
            return Err(Error::ShapeMismatch {
                op: "batch",
                lhs: shape,
                rhs: p.shape().to_vec(),
            });
        }
        data.extend_from_slice(p.data());
    }
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    Tensor::new(&shape, data)
}

/// Stacks equally sized pairs along the batch axis.
pub fn batch(pairs: &[TrainPair]) -> Result<TrainPair> {
    let field = |f: fn(&TrainPair) -> &Tensor| concat_batch(&pairs.iter().map(f).collect::<Vec<_>>());
    Ok(TrainPair {
        mag_in: field(|p| &p.mag_in)?,
        phase_in: field(|p| &p.phase_in)?,
        mag_gt: field(|p| &p.mag_gt)?,
        phase_gt: field(|p| &p.phase_gt)?,
    })
}

/// Weights plus optimizer state; owned by exactly one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub weights: CstnWeights,
    pub adam: AdamState,
}

impl TrainState {
    pub fn new(weights: CstnWeights) -> Self {
        let adam = AdamState::new(&flatten(&weights));
        Self { weights, adam }
    }
}

fn flatten(w: &CstnWeights) -> Vec<Tensor> {
    let mut out = Vec::new();
    w.visit(|_, t| out.push(t.clone()));
    out
}

/// Loss of the current weights on a batch, without recording gradients.
pub fn evaluate_loss(weights: &CstnWeights, b: &TrainPair, model: &CstnConfig, cfg: &TrainConfig) -> Result<f32> {
    let mut tape = Tape::inference();
    let w = weights.map(&mut |_, t| tape.constant(t.clone()));
    let [mi, pi, mg, pg] = [&b.mag_in, &b.phase_in, &b.mag_gt, &b.phase_gt].map(|t| tape.constant(t.clone()));
    let (hm, hp) = forward(&mut tape, &mi, &pi, model, &w)?;
    let l = l1_loss(&mut tape, &hm, &hp, &mg, &pg, cfg.lambda_mag, cfg.lambda_phase)?;
    Ok(l.value().data()[0])
}

/// Forward, backward and one Adam update at `lr`. Returns the loss before the
/// update; a non-finite loss aborts without touching the weights.
pub fn train_step(state: &mut TrainState, b: &TrainPair, model: &CstnConfig, cfg: &TrainConfig, lr: f64) -> Result<f32> {
    let mut tape = Tape::new();
    let w = state.weights.bind(&mut tape);
    let [mi, pi, mg, pg] = [&b.mag_in, &b.phase_in, &b.mag_gt, &b.phase_gt].map(|t| tape.constant(t.clone()));
    let (hm, hp) = forward(&mut tape, &mi, &pi, model, &w)?;
    let l = l1_loss(&mut tape, &hm, &hp, &mg, &pg, cfg.lambda_mag, cfg.lambda_phase)?;
    let value = l.value().data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    tape.backward(&l)?;
    let mut grads = Vec::new();
    w.visit(|_, v| grads.push(tape.take_grad(v)));
    drop(w);
    let mut params = flatten(&state.weights);
    adam_step(&mut params, &grads, &mut state.adam, cfg.adam(), lr)?;
    let mut it = params.into_iter();
    state.weights = state.weights.map(&mut |_, _| it.next().expect("parameter count is fixed"));
    if !state.weights.is_finite() {
        return Err(Error::NonFinite("weights after update"));
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::mri::{simulate_lowres, ComplexImage};
    use crate::phantom::generate_phantom;
    use crate::swin::RstbConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hp() -> AdamParams {
        AdamParams::default()
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut w = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::new(&w);
        for _ in 0..200 {
            let g = vec![w[0].map(|x| 2.0 * x)];
            adam_step(&mut w, &g, &mut st, hp(), 0.1).unwrap();
        }
        assert!(w[0].data()[0].abs() < 0.01, "{}", w[0].data()[0]);
        assert_eq!(st.step, 200);
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let mut w = vec![Tensor::new(&[2], vec![0.5, -2.0]).unwrap()];
        let before = w.clone();
        let mut st = AdamState::new(&w);
        adam_step(&mut w, &[Tensor::zeros(&[2])], &mut st, hp(), 0.01).unwrap();
        assert_eq!(w, before);

        // Moments from an earlier nonzero gradient decay geometrically.
        adam_step(&mut w, &[Tensor::new(&[2], vec![1.0, 1.0]).unwrap()], &mut st, hp(), 0.01).unwrap();
        let (m, v) = (st.m[0].clone(), st.v[0].clone());
        adam_step(&mut w, &[Tensor::zeros(&[2])], &mut st, hp(), 0.01).unwrap();
        for i in 0..2 {
            assert!((st.m[0].data()[i] - 0.9 * m.data()[i]).abs() < 1e-7);
            assert!((st.v[0].data()[i] - 0.999 * v.data()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        for g in [1e-4f32, 1.0, 1e4] {
            let mut w = vec![Tensor::scalar(0.0)];
            let mut st = AdamState::new(&w);
            adam_step(&mut w, &[Tensor::scalar(g)], &mut st, hp(), 0.05).unwrap();
            assert!((w[0].data()[0] + 0.05).abs() < 1e-5, "g={g}: {}", w[0].data()[0]);
        }
    }

    #[test]
    fn adam_rejects_mismatched_lists() {
        let mut w = vec![Tensor::scalar(0.0)];
        let mut st = AdamState::new(&w);
        assert!(adam_step(&mut w, &[], &mut st, hp(), 0.1).is_err());
        assert!(adam_step(&mut w, &[Tensor::zeros(&[2])], &mut st, hp(), 0.1).is_err());
    }

    #[test]
    fn lr_schedule_halves_twice() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            total_steps: 100,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 1.0);
        assert_eq!(cfg.lr_at(49), 1.0);
        assert_eq!(cfg.lr_at(50), 0.5);
        assert_eq!(cfg.lr_at(75), 0.25);
        assert_eq!(cfg.lr_at(99), 0.25);
    }

    fn volume(mag: Vec<f32>, phase: Vec<f32>, h: usize, w: usize) -> MultiEchoVolume {
        MultiEchoVolume::new(vec![ComplexImage::from_polar(h, w, mag, phase).unwrap()], vec![10.0]).unwrap()
    }

    #[test]
    fn loss_examples() {
        let gt = volume(vec![0.2, 0.4, 0.6, 0.8], vec![0.3, -1.0, 2.0, 0.0], 2, 2);
        let (m, p) = preprocess(&gt, (2, 2)).unwrap();
        assert_eq!(loss(&m, &p, &gt, 1.0, 1.0).unwrap(), 0.0);

        let wrapped = volume(vec![0.2, 0.4, 0.6, 0.8], vec![0.3, -1.0, 2.0, 0.0], 2, 2);
        let shifted = volume(
            vec![0.2, 0.4, 0.6, 0.8],
            vec![0.3 + 2.0 * core::f32::consts::PI, -1.0, 2.0, 0.0],
            2,
            2,
        );
        let (_, p_a) = preprocess(&wrapped, (2, 2)).unwrap();
        let (_, p_b) = preprocess(&shifted, (2, 2)).unwrap();
        let la = loss(&m, &p_a, &gt, 0.0, 1.0).unwrap();
        let lb = loss(&m, &p_b, &gt, 0.0, 1.0).unwrap();
        assert!((la - lb).abs() < 1e-6);

        let off = m.map(|v| v + 0.1);
        let direct: f32 = off.data().iter().zip(m.data()).map(|(a, b)| (a - b).abs()).sum::<f32>() / 4.0;
        let l = loss(&off, &p, &gt, 1.0, 0.0).unwrap();
        assert!((l - direct).abs() < 1e-6);
        assert!(loss(&off, &p, &gt, 1.0, 1.0).unwrap() > 0.0);
    }

    #[test]
    fn crops_and_batches() {
        let t = Tensor::from_fn(&[1, 2, 4, 5], |i| i as f32);
        let c = crop(&t, 1, 2, 2).unwrap();
        assert_eq!(c.data(), &[7.0, 8.0, 12.0, 13.0, 27.0, 28.0, 32.0, 33.0]);
        assert!(crop(&t, 3, 0, 2).is_err());
        let pair = TrainPair {
            mag_in: t.clone(),
            phase_in: t.clone(),
            mag_gt: t.clone(),
            phase_gt: t,
        };
        let b = batch(&[pair.crop(0, 0, 3).unwrap(), pair.crop(1, 2, 3).unwrap()]).unwrap();
        assert_eq!(b.mag_in.shape(), &[2, 2, 3, 3]);
        assert!(pair.random_crop(6, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    fn tiny_model() -> CstnConfig {
        CstnConfig {
            num_rstb: 1,
            rstb: RstbConfig {
                depth: 2,
                num_heads: 2,
                embed_dim: 8,
                mlp_ratio: 2,
                window_size: 4,
            },
            in_echoes: 2,
            target_size: (16, 16),
            shallow_channels: 8,
            head_channels: 8,
        }
    }

    fn tiny_batch() -> TrainPair {
        let (hr, _) = generate_phantom(4, 32, 32, &[10.0, 20.0]).unwrap();
        let lr = simulate_lowres(&hr, 20, 20).unwrap();
        TrainPair::new(&lr, &hr).unwrap().crop(8, 8, 16).unwrap()
    }

    #[test]
    fn training_steps_reduce_loss_deterministically() {
        let model = tiny_model();
        let cfg = TrainConfig {
            learning_rate: 2e-3,
            ..TrainConfig::default()
        };
        let b = tiny_batch();
        let run = || {
            let mut st = TrainState::new(CstnWeights::init(&model, 1).unwrap());
            let losses: Vec<f32> = (0..30).map(|_| train_step(&mut st, &b, &model, &cfg, cfg.learning_rate).unwrap()).collect();
            (losses, st)
        };
        let (l1, s1) = run();
        let (l2, s2) = run();
        assert_eq!(l1, l2);
        assert_eq!(s1, s2);
        let after = evaluate_loss(&s1.weights, &b, &model, &cfg).unwrap();
        assert!(after < 0.97 * l1[0], "{} -> {after}", l1[0]);
        assert_eq!(evaluate_loss(&CstnWeights::init(&model, 1).unwrap(), &b, &model, &cfg).unwrap(), l1[0]);
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let model = tiny_model();
        let mut st = TrainState::new(CstnWeights::init(&model, 1).unwrap());
        let mut b = tiny_batch();
        b.mag_gt.data_mut()[0] = f32::NAN;
        let before = st.clone();
        let err = train_step(&mut st, &b, &model, &TrainConfig::default(), 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(st, before);
    }

    #[test]
    fn config_round_trip() {
        let src = TrainConfig {
            seed: 9,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let mut c = TrainConfig::default();
        for (k, v) in src.entries() {
            c.set(k, &v).unwrap();
        }
        assert_eq!(c, src);
        assert_eq!((c.seed, c.learning_rate), (9, 1e-3));
        assert!(matches!(c.set("train.nope", "1"), Err(Error::UnknownKey(_))));
        assert!(matches!(c.set("train.seed", "x"), Err(Error::BadValue { .. })));
        assert!(c.validate().is_ok());
        c.beta1 = 1.0;
        assert!(c.validate().is_err());
    }
}
