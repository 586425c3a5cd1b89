//! Windowed self-attention blocks: window partitioning, relative position
//! bias, (shifted) window attention, the Swin layer and the residual Swin
//! transformer block (RSTB).
//!
//! Feature maps inside a Swin layer are channels-last `[N, H, W, C]`; the
//! RSTB takes and returns channels-first `[N, C, H, W]` like the convolutions
//! around it. Maps whose sides are not window multiples are reflect-padded
//! for attention and cropped afterwards.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Padding, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::kernels::reflect;
use crate::tensor::Tensor;
#[allow(unused_imports)] // shadowed by std methods when a dependency links std
use num_traits::Float;

pub const LAYER_NORM_EPS: f32 = 1e-5;
/// Additive attention mask between tokens from different shifted regions.
pub const MASK_VALUE: f32 = -1e9;

/// Hyper-parameters of one RSTB.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RstbConfig {
    /// Swin layers per block; even, alternating unshifted/shifted windows.
    pub depth: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    /// MLP hidden width as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    pub window_size: usize,
}

impl Default for RstbConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            num_heads: 4,
            embed_dim: 48,
            mlp_ratio: 2,
            window_size: 8,
        }
    }
}

impl RstbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(invalid("embed_dim", format!("{} is not a positive multiple of num_heads {}", self.embed_dim, self.num_heads)));
        }
        if self.depth == 0 || self.depth % 2 != 0 {
            return Err(invalid("depth", format!("{} must be positive and even", self.depth)));
        }
        if self.window_size == 0 {
            return Err(invalid("window_size", "must be positive"));
        }
        if self.mlp_ratio == 0 {
            return Err(invalid("mlp_ratio", "must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Tokens per window.
    pub fn tokens(&self) -> usize {
        self.window_size * self.window_size
    }

    /// Shift of layer `i`: 0 for even layers, `w/2` for odd ones.
    pub fn shift_of(&self, layer: usize) -> usize {
        if layer % 2 == 0 {
            0
        } else {
            self.window_size / 2
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

/// Dense layer `y = x·W + b` with `W[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

impl<T> Linear<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Linear<U> {
        Linear {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }
}

impl Linear<Var> {
    pub fn forward(&self, tape: &mut Tape, x: &Var) -> Result<Var> {
        let y = tape.matmul(x, &self.weight)?;
        tape.add_broadcast(&y, &self.bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}

impl<T> Norm<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Norm<U> {
        Norm {
            gamma: f(&join(prefix, "gamma"), &self.gamma),
            beta: f(&join(prefix, "beta"), &self.beta),
        }
    }
}

impl Norm<Var> {
    pub fn forward(&self, tape: &mut Tape, x: &Var) -> Result<Var> {
        tape.layer_norm(x, &self.gamma, &self.beta, LAYER_NORM_EPS)
    }
}

/// 3×3 "same" convolution, zero padded. `weight[O, C, k, k]`, `bias[O]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub weight: T,
    pub bias: T,
}

impl<T> Conv<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Conv<U> {
        Conv {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }
}

impl Conv<Var> {
    pub fn forward(&self, tape: &mut Tape, x: &Var) -> Result<Var> {
        tape.conv2d(x, &self.weight, Some(&self.bias), Padding::Zeros)
    }
}

/// Attention weights of one Swin layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    /// `[(2w−1)², heads]` relative position bias table.
    pub bias_table: T,
}

impl<T> Attention<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Attention<U> {
        Attention {
            qkv: self.qkv.map(&join(prefix, "qkv"), f),
            proj: self.proj.map(&join(prefix, "proj"), f),
            bias_table: f(&join(prefix, "bias_table"), &self.bias_table),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwinLayer<T> {
    pub norm1: Norm<T>,
    pub attn: Attention<T>,
    pub norm2: Norm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T> SwinLayer<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> SwinLayer<U> {
        SwinLayer {
            norm1: self.norm1.map(&join(prefix, "norm1"), f),
            attn: self.attn.map(&join(prefix, "attn"), f),
            norm2: self.norm2.map(&join(prefix, "norm2"), f),
            fc1: self.fc1.map(&join(prefix, "fc1"), f),
            fc2: self.fc2.map(&join(prefix, "fc2"), f),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rstb<T> {
    pub layers: Vec<SwinLayer<T>>,
    pub conv: Conv<T>,
}

impl<T> Rstb<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Rstb<U> {
        Rstb {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&join(prefix, &format!("layers.{i}")), f))
                .collect(),
            conv: self.conv.map(&join(prefix, "conv"), f),
        }
    }
}

/// Shapes of every tensor in an RSTB, with zero values.
pub fn rstb_zeros(cfg: &RstbConfig) -> Rstb<Tensor> {
    let c = cfg.embed_dim;
    let hid = cfg.hidden_dim();
    let lin = |i: usize, o: usize| Linear {
        weight: Tensor::zeros(&[i, o]),
        bias: Tensor::zeros(&[o]),
    };
    let norm = || Norm {
        gamma: Tensor::full(&[c], 1.0),
        beta: Tensor::zeros(&[c]),
    };
    let table_rows = (2 * cfg.window_size - 1).pow(2);
    Rstb {
        layers: (0..cfg.depth)
            .map(|_| SwinLayer {
                norm1: norm(),
                attn: Attention {
                    qkv: lin(c, 3 * c),
                    proj: lin(c, c),
                    bias_table: Tensor::zeros(&[table_rows, cfg.num_heads]),
                },
                norm2: norm(),
                fc1: lin(c, hid),
                fc2: lin(hid, c),
            })
            .collect(),
        conv: Conv {
            weight: Tensor::zeros(&[c, c, 3, 3]),
            bias: Tensor::zeros(&[c]),
        },
    }
}

/// `[N, H, W, C]` → `[N·(H/w)·(W/w), w, w, C]`, windows in row-major order.
pub fn window_partition(tape: &mut Tape, x: &Var, w: usize) -> Result<Var> {
    let s = x.shape().to_vec();
    if s.len() != 4 || w == 0 || s[1] % w != 0 || s[2] % w != 0 {
        return Err(Error::InvalidShape {
            op: "window_partition",
            shape: s,
            reason: "expects [N, H, W, C] with H and W divisible by the window size",
        });
    }
    let (n, h, wd, c) = (s[0], s[1], s[2], s[3]);
    let y = tape.reshape(x, &[n, h / w, w, wd / w, w, c])?;
    let y = tape.permute(&y, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(&y, &[n * (h / w) * (wd / w), w, w, c])
}

/// Inverse of [`window_partition`] for an `h × wd` map.
pub fn window_reverse(tape: &mut Tape, windows: &Var, w: usize, h: usize, wd: usize) -> Result<Var> {
    let s = windows.shape().to_vec();
    let per_image = if w > 0 && h % w == 0 && wd % w == 0 { (h / w) * (wd / w) } else { 0 };
    if s.len() != 4 || per_image == 0 || s[0] % per_image != 0 || s[1] != w || s[2] != w {
        return Err(Error::InvalidShape {
            op: "window_reverse",
            shape: s,
            reason: "expects [N·nW, w, w, C] matching the map size",
        });
    }
    let (n, c) = (s[0] / per_image, s[3]);
    let y = tape.reshape(windows, &[n, h / w, wd / w, w, w, c])?;
    let y = tape.permute(&y, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(&y, &[n, h, wd, c])
}

/// Table row for every (query, key) token pair of a `w × w` window,
/// flattened `[w², w²]`.
pub fn relative_position_index(w: usize) -> Vec<usize> {
    let t = w * w;
    let side = 2 * w - 1;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        let (r1, c1) = (i / w, i % w);
        for j in 0..t {
            let (r2, c2) = (j / w, j % w);
            idx.push((r1 + w - 1 - r2) * side + (c1 + w - 1 - c2));
        }
    }
    idx
}

/// `[heads, w², w²]` bias gathered from a `[(2w−1)², heads]` table.
pub fn relative_position_bias(tape: &mut Tape, table: &Var, w: usize) -> Result<Var> {
    gather_bias(tape, table, &relative_position_index(w), w * w)
}

fn gather_bias(tape: &mut Tape, table: &Var, index: &[usize], t: usize) -> Result<Var> {
    let heads = table.shape()[1];
    let rows = tape.index_select(table, index)?;
    let rows = tape.reshape(&rows, &[t, t, heads])?;
    tape.permute(&rows, &[2, 0, 1])
}

/// Region labels of a padded `h × wd` map for a cyclic shift, as in
/// shifted-window attention: tokens only attend within their own region.
pub fn shifted_window_mask(h: usize, wd: usize, w: usize, shift: usize) -> Tensor {
    let band = |len: usize, i: usize| {
        if i < len - w {
            0
        } else if i < len - shift {
            1
        } else {
            2
        }
    };
    let nh = h / w;
    let nw = wd / w;
    let t = w * w;
    let mut data = vec![0.0f32; nh * nw * t * t];
    let mut labels = vec![0usize; t];
    for wy in 0..nh {
        for wx in 0..nw {
            for (k, l) in labels.iter_mut().enumerate() {
                let (y, x) = (wy * w + k / w, wx * w + k % w);
                *l = band(h, y) * 3 + band(wd, x);
            }
            let base = (wy * nw + wx) * t * t;
            for i in 0..t {
                for j in 0..t {
                    if labels[i] != labels[j] {
                        data[base + i * t + j] = MASK_VALUE;
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![nh * nw, t, t], data)
}

/// Multi-head self-attention over windows `x[B, T, C]`. `bias` is
/// `[heads, T, T]`; `mask` is `[nW, T, T]` with `B` a multiple of `nW`.
pub fn window_attention(
    tape: &mut Tape,
    x: &Var,
    attn: &Attention<Var>,
    heads: usize,
    bias: &Var,
    mask: Option<&Var>,
) -> Result<Var> {
    let (probs, v) = probs_and_values(tape, x, attn, heads, bias, mask)?;
    let (b, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let out = tape.matmul(&probs, &v)?;
    let out = tape.permute(&out, &[0, 2, 1, 3])?;
    let out = tape.reshape(&out, &[b, t, c])?;
    attn.proj.forward(tape, &out)
}

/// Attention probabilities `[B, heads, T, T]` of [`window_attention`].
pub fn attention_weights(
    tape: &mut Tape,
    x: &Var,
    attn: &Attention<Var>,
    heads: usize,
    bias: &Var,
    mask: Option<&Var>,
) -> Result<Var> {
    Ok(probs_and_values(tape, x, attn, heads, bias, mask)?.0)
}

fn probs_and_values(
    tape: &mut Tape,
    x: &Var,
    attn: &Attention<Var>,
    heads: usize,
    bias: &Var,
    mask: Option<&Var>,
) -> Result<(Var, Var)> {
    let s = x.shape().to_vec();
    if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
        return Err(Error::InvalidShape {
            op: "window_attention",
            shape: s,
            reason: "expects [B, T, C] with C divisible by the head count",
        });
    }
    let (b, t, c) = (s[0], s[1], s[2]);
    let d = c / heads;
    let qkv = attn.qkv.forward(tape, x)?;
    let qkv = tape.reshape(&qkv, &[b, t, 3, heads, d])?;
    let qkv = tape.permute(&qkv, &[2, 0, 3, 1, 4])?;
    let mut part = |i: usize| -> Result<Var> {
        let p = tape.slice(&qkv, 0, i, 1)?;
        tape.reshape(&p, &[b, heads, t, d])
    };
    let (q, k, v) = (part(0)?, part(1)?, part(2)?);
    let q = tape.mul_scalar(&q, 1.0 / (d as f32).sqrt());
    let scores = tape.matmul_nt(&q, &k)?;
    let mut scores = tape.add_broadcast(&scores, bias)?;
    if let Some(m) = mask {
        let ms = m.shape();
        if ms.len() != 3 || ms[1] != t || ms[2] != t || ms[0] == 0 || b % ms[0] != 0 {
            return Err(Error::ShapeMismatch {
                op: "window_attention mask",
                lhs: vec![b, heads, t, t],
                rhs: ms.to_vec(),
            });
        }
        let nw = ms[0];
        let sc = tape.reshape(&scores, &[b / nw, nw, heads, t, t])?;
        let m = tape.reshape(m, &[nw, 1, t, t])?;
        let sc = tape.add_broadcast(&sc, &m)?;
        scores = tape.reshape(&sc, &[b, heads, t, t])?;
    }
    let probs = tape.softmax(&scores, 3)?;
    Ok((probs, v))
}

/// Index maps and masks shared by every layer of a forward pass at one
/// spatial size.
pub struct SwinGeometry {
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    window: usize,
    shift: usize,
    /// Gather for pad + roll, per shift (0 and `w/2`).
    gather: [(Vec<usize>, Vec<usize>); 2],
    /// Gather for unroll + crop.
    scatter: [(Vec<usize>, Vec<usize>); 2],
    mask: Option<Var>,
    rel_index: Vec<usize>,
}

impl SwinGeometry {
    pub fn new(tape: &mut Tape, height: usize, width: usize, cfg: &RstbConfig) -> Result<Self> {
        let w = cfg.window_size;
        if height == 0 || width == 0 {
            return Err(invalid("feature map", "must be non-empty"));
        }
        let ph = height.div_ceil(w) * w;
        let pw = width.div_ceil(w) * w;
        let shift = cfg.window_size / 2;
        let gather_axis = |len: usize, padded: usize, s: usize| -> Vec<usize> {
            (0..padded).map(|i| reflect(((i + s) % padded) as isize, len)).collect()
        };
        let scatter_axis = |len: usize, padded: usize, s: usize| -> Vec<usize> { (0..len).map(|i| (i + padded - s) % padded).collect() };
        let gather = [0, shift].map(|s| (gather_axis(height, ph, s), gather_axis(width, pw, s)));
        let scatter = [0, shift].map(|s| (scatter_axis(height, ph, s), scatter_axis(width, pw, s)));
        let mask = if shift > 0 {
            Some(tape.constant(shifted_window_mask(ph, pw, w, shift)))
        } else {
            None
        };
        Ok(Self {
            height,
            width,
            padded_height: ph,
            padded_width: pw,
            window: w,
            shift,
            gather,
            scatter,
            mask,
            rel_index: relative_position_index(w),
        })
    }
}

/// One Swin layer on `x[N, H, W, C]`; `shifted` selects the `w/2` roll.
pub fn swin_layer(tape: &mut Tape, x: &Var, layer: &SwinLayer<Var>, cfg: &RstbConfig, geo: &SwinGeometry, shifted: bool) -> Result<Var> {
    let s = x.shape().to_vec();
    if s.len() != 4 || s[1] != geo.height || s[2] != geo.width || s[3] != cfg.embed_dim {
        return Err(Error::InvalidShape {
            op: "swin_layer",
            shape: s,
            reason: "expects [N, H, W, embed_dim] matching the geometry",
        });
    }
    let (n, c, w) = (s[0], s[3], geo.window);
    let which = usize::from(shifted && geo.shift > 0);
    let t = w * w;

    let h1 = layer.norm1.forward(tape, x)?;
    let (rows, cols) = &geo.gather[which];
    let h1 = tape.remap_hw(&h1, rows, cols)?;
    let win = window_partition(tape, &h1, w)?;
    let nwin = win.shape()[0];
    let win = tape.reshape(&win, &[nwin, t, c])?;
    let bias = gather_bias(tape, &layer.attn.bias_table, &geo.rel_index, t)?;
    let mask = if which == 1 { geo.mask.as_ref() } else { None };
    let a = window_attention(tape, &win, &layer.attn, cfg.num_heads, &bias, mask)?;
    let a = tape.reshape(&a, &[nwin, w, w, c])?;
    let a = window_reverse(tape, &a, w, geo.padded_height, geo.padded_width)?;
    let (rows, cols) = &geo.scatter[which];
    let a = tape.remap_hw(&a, rows, cols)?;
    debug_assert_eq!(a.shape(), [n, geo.height, geo.width, c]);
    let x = tape.add(x, &a)?;

    let h2 = layer.norm2.forward(tape, &x)?;
    let h2 = layer.fc1.forward(tape, &h2)?;
    let h2 = tape.gelu(&h2);
    let h2 = layer.fc2.forward(tape, &h2)?;
    tape.add(&x, &h2)
}

/// RSTB on `x[N, C, H, W]`: Swin layers, 3×3 conv, plus the block input.
pub fn rstb_forward(tape: &mut Tape, x: &Var, block: &Rstb<Var>, cfg: &RstbConfig, geo: &SwinGeometry) -> Result<Var> {
    let mut h = tape.permute(x, &[0, 2, 3, 1])?;
    for (i, layer) in block.layers.iter().enumerate() {
        h = swin_layer(tape, &h, layer, cfg, geo, cfg.shift_of(i) > 0)?;
    }
    let h = tape.permute(&h, &[0, 3, 1, 2])?;
    let h = block.conv.forward(tape, &h)?;
    tape.add(x, &h)
}
