//! The complex Swin transformer network (CSTN).
//!
//! Magnitude `[N, E, H, W]` and phase `[N, 2E, H, W]` inputs (phase as
//! interleaved cos/sin channel pairs) pass through separate 3×3 shallow
//! convs, are concatenated and fused to `embed_dim` channels, refined by a
//! stack of RSTBs plus a body conv with a global residual, and decoded by two
//! conv→GELU→conv heads. Each head adds its output to the matching input, and
//! the phase head's result is renormalized to unit cos/sin pairs.
//!
//! Low-resolution volumes are bicubically upsampled to the target grid
//! before the network ([`preprocess`]); the network only refines.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{unit_pair, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::interp;
use crate::mri::{wrap_phase, ComplexImage, MultiEchoVolume};
use crate::swin::{join, rstb_forward, rstb_zeros, Conv, Rstb, RstbConfig, SwinGeometry};
use crate::tensor::Tensor;
#[allow(unused_imports)] // shadowed by std methods when a dependency links std
use num_traits::Float;

/// Network hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CstnConfig {
    pub num_rstb: usize,
    pub rstb: RstbConfig,
    pub in_echoes: usize,
    /// `(height, width)` of the output grid.
    pub target_size: (usize, usize),
    pub shallow_channels: usize,
    pub head_channels: usize,
}

impl Default for CstnConfig {
    fn default() -> Self {
        Self {
            num_rstb: 6,
            rstb: RstbConfig::default(),
            in_echoes: 3,
            target_size: (384, 384),
            shallow_channels: 32,
            head_channels: 32,
        }
    }
}

/// Keys of [`CstnConfig::entries`], in order.
pub const CONFIG_KEYS: [&str; 11] = [
    "model.num_rstb",
    "model.depth",
    "model.num_heads",
    "model.embed_dim",
    "model.mlp_ratio",
    "model.window_size",
    "model.in_echoes",
    "model.target_height",
    "model.target_width",
    "model.shallow_channels",
    "model.head_channels",
];

impl CstnConfig {
    pub fn validate(&self) -> Result<()> {
        self.rstb.validate()?;
        let positive = [
            ("num_rstb", self.num_rstb),
            ("in_echoes", self.in_echoes),
            ("target_height", self.target_size.0),
            ("target_width", self.target_size.1),
            ("shallow_channels", self.shallow_channels),
            ("head_channels", self.head_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid("model config", format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// `key=value` view of the configuration.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let values = [
            self.num_rstb,
            self.rstb.depth,
            self.rstb.num_heads,
            self.rstb.embed_dim,
            self.rstb.mlp_ratio,
            self.rstb.window_size,
            self.in_echoes,
            self.target_size.0,
            self.target_size.1,
            self.shallow_channels,
            self.head_channels,
        ];
        CONFIG_KEYS.iter().zip(values).map(|(k, v)| (*k, v.to_string())).collect()
    }

    /// Sets one `model.*` key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v: usize = value.trim().parse().map_err(|_| Error::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        })?;
        let slot = match key {
            "model.num_rstb" => &mut self.num_rstb,
            "model.depth" => &mut self.rstb.depth,
            "model.num_heads" => &mut self.rstb.num_heads,
            "model.embed_dim" => &mut self.rstb.embed_dim,
            "model.mlp_ratio" => &mut self.rstb.mlp_ratio,
            "model.window_size" => &mut self.rstb.window_size,
            "model.in_echoes" => &mut self.in_echoes,
            "model.target_height" => &mut self.target_size.0,
            "model.target_width" => &mut self.target_size.1,
            "model.shallow_channels" => &mut self.shallow_channels,
            "model.head_channels" => &mut self.head_channels,
            _ => return Err(Error::UnknownKey(key.to_string())),
        };
        *slot = v;
        Ok(())
    }

    /// Errors naming the first key where `other` differs.
    pub fn ensure_matches(&self, other: &CstnConfig) -> Result<()> {
        for ((key, a), (_, b)) in self.entries().into_iter().zip(other.entries()) {
            if a != b {
                return Err(Error::ConfigMismatch {
                    key: key.to_string(),
                    expected: a,
                    found: b,
                });
            }
        }
        Ok(())
    }
}

/// conv → GELU → conv output head.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub conv1: Conv<T>,
    pub conv2: Conv<T>,
}

impl<T> Head<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Head<U> {
        Head {
            conv1: self.conv1.map(&join(prefix, "conv1"), f),
            conv2: self.conv2.map(&join(prefix, "conv2"), f),
        }
    }
}

impl Head<Var> {
    fn forward(&self, tape: &mut Tape, x: &Var) -> Result<Var> {
        let h = self.conv1.forward(tape, x)?;
        let h = tape.gelu(&h);
        self.conv2.forward(tape, &h)
    }
}

/// All network parameters; `Cstn<Tensor>` stores them, `Cstn<Var>` is the
/// same set bound to a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Cstn<T> {
    pub mag_shallow: Conv<T>,
    pub phase_shallow: Conv<T>,
    pub fusion: Conv<T>,
    pub blocks: Vec<Rstb<T>>,
    pub body: Conv<T>,
    pub mag_head: Head<T>,
    pub phase_head: Head<T>,
}

pub type CstnWeights = Cstn<Tensor>;

impl<T> Cstn<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U) -> Cstn<U> {
        Cstn {
            mag_shallow: self.mag_shallow.map("mag_shallow", f),
            phase_shallow: self.phase_shallow.map("phase_shallow", f),
            fusion: self.fusion.map("fusion", f),
            blocks: self.blocks.iter().enumerate().map(|(i, b)| b.map(&format!("blocks.{i}"), f)).collect(),
            body: self.body.map("body", f),
            mag_head: self.mag_head.map("mag_head", f),
            phase_head: self.phase_head.map("phase_head", f),
        }
    }

    /// Calls `f` on every parameter in a fixed order.
    pub fn visit(&self, mut f: impl FnMut(&str, &T)) {
        self.map(&mut |name, t| f(name, t));
    }
}

fn conv_zeros(out: usize, inp: usize) -> Conv<Tensor> {
    Conv {
        weight: Tensor::zeros(&[out, inp, 3, 3]),
        bias: Tensor::zeros(&[out]),
    }
}

impl CstnWeights {
    /// Every tensor at its configured shape, all zeros except layer-norm
    /// gains (ones).
    pub fn zeros(cfg: &CstnConfig) -> Result<Self> {
        cfg.validate()?;
        let (e, s, d, hc) = (cfg.in_echoes, cfg.shallow_channels, cfg.rstb.embed_dim, cfg.head_channels);
        Ok(Self {
            mag_shallow: conv_zeros(s, e),
            phase_shallow: conv_zeros(s, 2 * e),
            fusion: conv_zeros(d, 2 * s),
            blocks: (0..cfg.num_rstb).map(|_| rstb_zeros(&cfg.rstb)).collect(),
            body: conv_zeros(d, d),
            mag_head: Head {
                conv1: conv_zeros(hc, d),
                conv2: conv_zeros(e, hc),
            },
            phase_head: Head {
                conv1: conv_zeros(hc, d),
                conv2: conv_zeros(2 * e, hc),
            },
        })
    }

    /// Seeded initialization: truncated normal (σ = 0.02, cut at 2σ) for
    /// attention, MLP and position-bias tables; Kaiming-uniform for convs;
    /// zero biases; unit layer-norm gains; zeros for the body conv and the
    /// last conv of each head, which makes the initial network the identity.
    pub fn init(cfg: &CstnConfig, seed: u64) -> Result<Self> {
        let template = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 0.02).expect("valid σ");
        Ok(template.map(&mut |name, t| {
            let zero_init = name.starts_with("body.") || name.ends_with("conv2.weight");
            let shape = t.shape();
            if name.ends_with("bias") || name.ends_with("beta") || name.ends_with("gamma") || zero_init {
                t.clone()
            } else if shape.len() == 4 {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
                let bound = (6.0 / fan_in).sqrt();
                Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
            } else {
                Tensor::from_fn(shape, |_| loop {
                    let v = normal.sample(&mut rng);
                    if v.abs() <= 0.04 {
                        break v;
                    }
                })
            }
        }))
    }

    /// `(name, tensor)` pairs in the canonical order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(|name, t| out.push((name.to_string(), t.clone())));
        out
    }

    /// Rebuilds weights for `cfg` from named tensors (any order), checking
    /// that every name is known, present once, and correctly shaped.
    pub fn from_named(cfg: &CstnConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let template = Self::zeros(cfg)?;
        let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
        for (n, t) in named {
            if by_name.insert(n.clone(), t).is_some() {
                return Err(Error::UnexpectedTensor(n));
            }
        }
        let mut failure = None;
        let weights = template.map(&mut |name, t| match by_name.remove(name) {
            Some(v) if v.shape() == t.shape() => v,
            Some(v) => {
                failure.get_or_insert(Error::ShapeMismatch {
                    op: "checkpoint tensor",
                    lhs: t.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
                t.clone()
            }
            None => {
                failure.get_or_insert(Error::MissingTensor(name.to_string()));
                t.clone()
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(n) = by_name.into_keys().next() {
            return Err(Error::UnexpectedTensor(n));
        }
        if !weights.is_finite() {
            return Err(Error::NonFinite("checkpoint weights"));
        }
        Ok(weights)
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, t| ok &= t.is_finite());
        ok
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.numel());
        n
    }

    /// Registers every tensor on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Cstn<Var> {
        self.map(&mut |_, t| tape.param(t.clone()))
    }
}

/// Network forward pass; returns `(hq_mag, hq_phase)`.
pub fn forward(tape: &mut Tape, mag_in: &Var, phase_in: &Var, cfg: &CstnConfig, w: &Cstn<Var>) -> Result<(Var, Var)> {
    let (ms, ps) = (mag_in.shape().to_vec(), phase_in.shape().to_vec());
    if ms.len() != 4 || ps.len() != 4 || ms[0] != ps[0] || ms[2..] != ps[2..] || ms[1] != cfg.in_echoes || ps[1] != 2 * cfg.in_echoes {
        return Err(Error::ShapeMismatch {
            op: "cstn forward (magnitude vs phase input)",
            lhs: ms,
            rhs: ps,
        });
    }
    if w.blocks.len() != cfg.num_rstb {
        return Err(Error::ConfigMismatch {
            key: "model.num_rstb".to_string(),
            expected: cfg.num_rstb.to_string(),
            found: w.blocks.len().to_string(),
        });
    }
    let m = w.mag_shallow.forward(tape, mag_in)?;
    let p = w.phase_shallow.forward(tape, phase_in)?;
    let cat = tape.concat(&[&m, &p], 1)?;
    let fused = w.fusion.forward(tape, &cat)?;
    let geo = SwinGeometry::new(tape, ms[2], ms[3], &cfg.rstb)?;
    let mut h = fused.clone();
    for block in &w.blocks {
        h = rstb_forward(tape, &h, block, &cfg.rstb, &geo)?;
    }
    let body = w.body.forward(tape, &h)?;
    let deep = tape.add(&fused, &body)?;
    let mr = w.mag_head.forward(tape, &deep)?;
    let hq_mag = tape.add(mag_in, &mr)?;
    let pr = w.phase_head.forward(tape, &deep)?;
    let hq_phase = tape.add(phase_in, &pr)?;
    let hq_phase = tape.normalize_pairs(&hq_phase)?;
    Ok((hq_mag, hq_phase))
}

/// Inference convenience: forward on a non-recording tape.
pub fn infer(mag_in: &Tensor, phase_in: &Tensor, cfg: &CstnConfig, weights: &CstnWeights) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::inference();
    let w = weights.map(&mut |_, t| tape.constant(t.clone()));
    let m = tape.constant(mag_in.clone());
    let p = tape.constant(phase_in.clone());
    let (hm, hp) = forward(&mut tape, &m, &p, cfg, &w)?;
    drop(w);
    Ok((hm.into_tensor(), hp.into_tensor()))
}

/// Unit-length pair that [`unit_pair`] maps to itself, so renormalizing an
/// already normalized input is bit-exact.
pub fn stable_unit_pair(c: f32, s: f32) -> (f32, f32) {
    let mut cur = unit_pair(c, s);
    for _ in 0..8 {
        let next = unit_pair(cur.0, cur.1);
        if next == cur {
            break;
        }
        cur = next;
    }
    cur
}

/// Upsamples a low-resolution volume to `target` and encodes it as network
/// inputs: magnitude `[1, E, H, W]` and interleaved cos/sin phase
/// `[1, 2E, H, W]`, each pair renormalized to unit length.
pub fn preprocess(lr: &MultiEchoVolume, target: (usize, usize)) -> Result<(Tensor, Tensor)> {
    let (lh, lw) = (lr.height(), lr.width());
    let (th, tw) = target;
    if th < lh || tw < lw {
        return Err(invalid("target_size", format!("{th}×{tw} is smaller than the input {lh}×{lw}")));
    }
    let e = lr.num_echoes();
    let plane = th * tw;
    let mut mag = Vec::with_capacity(e * plane);
    let mut phase = vec![0.0f32; 2 * e * plane];
    for (k, echo) in lr.echoes().iter().enumerate() {
        mag.extend(interp::resize(echo.magnitude(), lh, lw, th, tw)?);
        let cos: Vec<f32> = echo.phase().iter().map(|&p| (p as f64).cos() as f32).collect();
        let sin: Vec<f32> = echo.phase().iter().map(|&p| (p as f64).sin() as f32).collect();
        let cu = interp::resize(&cos, lh, lw, th, tw)?;
        let su = interp::resize(&sin, lh, lw, th, tw)?;
        let (cd, sd) = phase[2 * k * plane..2 * (k + 1) * plane].split_at_mut(plane);
        for i in 0..plane {
            let (c, s) = stable_unit_pair(cu[i], su[i]);
            cd[i] = c;
            sd[i] = s;
        }
    }
    Ok((Tensor::from_parts(vec![1, e, th, tw], mag), Tensor::from_parts(vec![1, 2 * e, th, tw], phase)))
}

/// Decodes network outputs (batch entry 0) back to a volume: magnitude
/// clamped at 0, phase `atan2(sin, cos)` wrapped to `(−π, π]`.
pub fn postprocess(hq_mag: &Tensor, hq_phase: &Tensor, echo_times_ms: &[f64]) -> Result<MultiEchoVolume> {
    let (ms, ps) = (hq_mag.shape(), hq_phase.shape());
    if ms.len() != 4 || ps.len() != 4 || ps[1] != 2 * ms[1] || ms[2..] != ps[2..] || ms[0] != ps[0] {
        return Err(Error::ShapeMismatch {
            op: "postprocess",
            lhs: ms.to_vec(),
            rhs: ps.to_vec(),
        });
    }
    let (e, h, w) = (ms[1], ms[2], ms[3]);
    let plane = h * w;
    let md = hq_mag.data();
    let pd = hq_phase.data();
    let echoes = (0..e)
        .map(|k| {
            let mag = md[k * plane..(k + 1) * plane].iter().map(|&m| if m > 0.0 { m } else { 0.0 }).collect();
            let c = &pd[2 * k * plane..(2 * k + 1) * plane];
            let s = &pd[(2 * k + 1) * plane..(2 * k + 2) * plane];
            let ph = c.iter().zip(s).map(|(&c, &s)| wrap_phase((s as f64).atan2(c as f64))).collect();
            ComplexImage::from_polar(h, w, mag, ph)
        })
        .collect::<Result<Vec<_>>>()?;
    MultiEchoVolume::new(echoes, echo_times_ms.to_vec())
}

/// The network-free reference: upsample, encode, decode.
pub fn bicubic_baseline(lr: &MultiEchoVolume, target: (usize, usize)) -> Result<MultiEchoVolume> {
    let (m, p) = preprocess(lr, target)?;
    postprocess(&m, &p, lr.echo_times_ms())
}

/// `preprocess → forward → postprocess` for one low-resolution volume.
pub fn enhance(lr: &MultiEchoVolume, cfg: &CstnConfig, weights: &CstnWeights) -> Result<MultiEchoVolume> {
    if lr.num_echoes() != cfg.in_echoes {
        return Err(Error::ConfigMismatch {
            key: "model.in_echoes".to_string(),
            expected: cfg.in_echoes.to_string(),
            found: lr.num_echoes().to_string(),
        });
    }
    let (m, p) = preprocess(lr, cfg.target_size)?;
    let (hm, hp) = infer(&m, &p, cfg, weights)?;
    if !hm.is_finite() || !hp.is_finite() {
        return Err(Error::NonFinite("network output"));
    }
    postprocess(&hm, &hp, lr.echo_times_ms())
}
