//! Differentiable operations and their backward rules.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;


use super::{accumulate, Input, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{col2im_add, gemm, im2col, Padding};
use crate::tensor::{strides, Tensor};
#[allow(unused_imports)] // shadowed by std methods when a dependency links std
use num_traits::Float;

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)
const GELU_A: f32 = 0.044_715;

#[derive(Debug, Clone, Copy)]
pub(crate) struct MatmulDims {
    batch: usize,
    m: usize,
    n: usize,
    k: usize,
    a_batched: bool,
    b_batched: bool,
}

#[derive(Debug)]
pub(crate) enum Op {
    Add(Input, Input),
    Sub(Input, Input),
    Mul(Input, Input, Rc<Tensor>, Rc<Tensor>),
    Div(Input, Input, Rc<Tensor>, Rc<Tensor>),
    Identity(Input),
    MulScalar(Input, f32),
    AddBroadcast {
        a: Input,
        b: Input,
        a_shape: Vec<usize>,
        b_strides: Vec<usize>,
        b_len: usize,
    },
    Gelu(Input, Rc<Tensor>),
    Abs(Input, Rc<Tensor>),
    Matmul {
        a: Input,
        b: Input,
        av: Rc<Tensor>,
        bv: Rc<Tensor>,
        trans_b: bool,
        dims: MatmulDims,
    },
    Conv2d {
        x: Input,
        w: Input,
        bias: Option<Input>,
        xv: Rc<Tensor>,
        wv: Rc<Tensor>,
        padding: Padding,
    },
    LayerNorm {
        x: Input,
        gamma: Input,
        beta: Input,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
        gv: Rc<Tensor>,
    },
    Softmax {
        x: Input,
        y: Rc<Tensor>,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Permute {
        a: Input,
        out_shape: Vec<usize>,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<(Input, usize)>,
        outer: usize,
        inner: usize,
        total: usize,
    },
    Slice {
        a: Input,
        in_len: usize,
        outer: usize,
        inner: usize,
        axis_len: usize,
        start: usize,
        len: usize,
    },
    RemapHw {
        a: Input,
        in_shape: [usize; 4],
        rows: Vec<usize>,
        cols: Vec<usize>,
    },
    IndexSelect {
        a: Input,
        in_len: usize,
        width: usize,
        index: Vec<usize>,
    },
    Sum(Input, usize),
    Mean(Input, usize),
    NormalizePairs {
        a: Input,
        y: Rc<Tensor>,
        inv_r: Vec<f32>,
        plane: usize,
    },
}

fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Strides of `b` aligned to `a`'s axes (zero on broadcast axes).
fn broadcast_strides(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if b.len() > a.len() {
        return None;
    }
    let bs = strides(b);
    let offset = a.len() - b.len();
    let mut out = vec![0; a.len()];
    for (i, (&bd, &st)) in b.iter().zip(&bs).enumerate() {
        let ad = a[offset + i];
        if bd == ad {
            out[offset + i] = if bd == 1 { 0 } else { st };
        } else if bd != 1 {
            return None;
        }
    }
    Some(out)
}

/// Calls `f(a_row_offset, b_row_offset)` for every last-axis row of `a`.
fn for_each_row(a_shape: &[usize], b_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let nd = a_shape.len();
    let row = a_shape[nd - 1];
    let rows: usize = a_shape[..nd - 1].iter().product();
    let mut counter = vec![0usize; nd.saturating_sub(1)];
    let mut boff = 0usize;
    for r in 0..rows {
        f(r * row, boff);
        for ax in (0..nd - 1).rev() {
            counter[ax] += 1;
            boff += b_strides[ax];
            if counter[ax] < a_shape[ax] {
                break;
            }
            boff -= b_strides[ax] * a_shape[ax];
            counter[ax] = 0;
        }
    }
}

fn permute_data(data: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let nd = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // Input stride for each output axis.
    let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let last = out_shape[nd - 1];
    let last_stride = src[nd - 1];
    let rows: usize = out_shape[..nd - 1].iter().product();
    let mut counter = vec![0usize; nd - 1];
    let mut base = 0usize;
    for _ in 0..rows {
        if last_stride == 1 {
            out.extend_from_slice(&data[base..base + last]);
        } else {
            out.extend((0..last).map(|j| data[base + j * last_stride]));
        }
        for ax in (0..nd - 1).rev() {
            counter[ax] += 1;
            base += src[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            base -= src[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    (out, out_shape)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
fn gelu_fwd(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn matmul_dims(op: &'static str, a: &[usize], b: &[usize], trans_b: bool) -> Result<(MatmulDims, Vec<usize>)> {
    let mismatch = || Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (bk, n) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if k != bk {
        return Err(mismatch());
    }
    let (la, lb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let (lead, a_batched, b_batched) = if la == lb {
        (la.to_vec(), !la.is_empty(), !lb.is_empty())
    } else if lb.is_empty() {
        (la.to_vec(), true, false)
    } else if la.is_empty() {
        (lb.to_vec(), false, true)
    } else {
        return Err(mismatch());
    };
    let batch = lead.iter().product();
    let mut out = lead;
    out.extend_from_slice(&[m, n]);
    Ok((
        MatmulDims {
            batch,
            m,
            n,
            k,
            a_batched,
            b_batched,
        },
        out,
    ))
}

fn matmul_forward(a: &[f32], b: &[f32], d: MatmulDims, trans_b: bool) -> Vec<f32> {
    let MatmulDims { batch, m, n, k, a_batched, b_batched } = d;
    let mut out = vec![0.0; batch * m * n];
    if a_batched && !b_batched {
        // Shared right operand: one tall product.
        gemm(batch * m, n, k, a, false, b, trans_b, &mut out, false);
        return out;
    }
    for i in 0..batch {
        let ao = if a_batched { i * m * k } else { 0 };
        let bo = if b_batched { i * k * n } else { 0 };
        gemm(
            m,
            n,
            k,
            &a[ao..ao + m * k],
            false,
            &b[bo..bo + k * n],
            trans_b,
            &mut out[i * m * n..(i + 1) * m * n],
            false,
        );
    }
    out
}

impl Op {
    pub(crate) fn backward(self, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match self {
            Op::Add(a, b) => {
                if let Some(ga) = accumulate(grads, a, g.len()) {
                    add_into(ga, g);
                }
                if let Some(gb) = accumulate(grads, b, g.len()) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = accumulate(grads, a, g.len()) {
                    add_into(ga, g);
                }
                if let Some(gb) = accumulate(grads, b, g.len()) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b, av, bv) => {
                if let Some(ga) = accumulate(grads, a, g.len()) {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(bv.data()) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = accumulate(grads, b, g.len()) {
                    for ((d, &s), &x) in gb.iter_mut().zip(g).zip(av.data()) {
                        *d += s * x;
                    }
                }
            }
            Op::Div(a, b, av, bv) => {
                if let Some(ga) = accumulate(grads, a, g.len()) {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(bv.data()) {
                        *d += s / y;
                    }
                }
                if let Some(gb) = accumulate(grads, b, g.len()) {
                    for (((d, &s), &x), &y) in gb.iter_mut().zip(g).zip(av.data()).zip(bv.data()) {
                        *d -= s * x / (y * y);
                    }
                }
            }
            Op::Identity(a) => {
                if let Some(ga) = accumulate(grads, a, g.len()) {
                    add_into(ga, g);
                }
            }
            Op::MulScalar(a, c) => {
                if let Some(ga) = accumulate(grads, a, g.len()) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s * c);
                }
            }
            Op::AddBroadcast {
                a,
                b,
                a_shape,
                b_strides,
                b_len,
            } => {
                if let Some(ga) = accumulate(grads, a, g.len()) {
                    add_into(ga, g);
                }
                if let Some(gb) = accumulate(grads, b, b_len) {
                    let row = *a_shape.last().unwrap();
                    let bs = *b_strides.last().unwrap();
                    for_each_row(&a_shape, &b_strides, |ao, bo| {
                        let src = &g[ao..ao + row];
                        if bs == 0 {
                            gb[bo] += src.iter().sum::<f32>();
                        } else {
                            add_into(&mut gb[bo..bo + row], src);
                        }
                    });
                }
            }
            Op::Gelu(a, av) => {
                if let Some(ga) = accumulate(grads, a, g.len()) {
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(av.data()) {
                        *d += s * gelu_grad(x);
                    }
                }
            }
            Op::Abs(a, av) => {
                if let Some(ga) = accumulate(grads, a, g.len()) {
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(av.data()) {
                        if x > 0.0 {
                            *d += s;
                        } else if x < 0.0 {
                            *d -= s;
                        }
                    }
                }
            }
            Op::Matmul {
                a,
                b,
                av,
                bv,
                trans_b,
                dims,
            } => matmul_backward(g, grads, a, b, &av, &bv, trans_b, dims),
            Op::Conv2d {
                x,
                w,
                bias,
                xv,
                wv,
                padding,
            } => conv2d_backward(g, grads, x, w, bias, &xv, &wv, padding),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                gv,
            } => {
                let d = gv.numel();
                let gamma_v = gv.data();
                if let Some(gg) = accumulate(grads, gamma, d) {
                    for (grow, xrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for ((acc, &s), &xh) in gg.iter_mut().zip(grow).zip(xrow) {
                            *acc += s * xh;
                        }
                    }
                }
                if let Some(gb) = accumulate(grads, beta, d) {
                    for grow in g.chunks_exact(d) {
                        add_into(gb, grow);
                    }
                }
                if let Some(gx) = accumulate(grads, x, g.len()) {
                    let inv_d = 1.0 / d as f32;
                    for (((dst, grow), xrow), &rs) in gx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .zip(&rstd)
                    {
                        let mut mean_dy = 0.0f32;
                        let mut mean_dy_xhat = 0.0f32;
                        for ((&s, &gm), &xh) in grow.iter().zip(gamma_v).zip(xrow) {
                            let dy = s * gm;
                            mean_dy += dy;
                            mean_dy_xhat += dy * xh;
                        }
                        mean_dy *= inv_d;
                        mean_dy_xhat *= inv_d;
                        for (((o, &s), &gm), &xh) in dst.iter_mut().zip(grow).zip(gamma_v).zip(xrow) {
                            *o += rs * (s * gm - mean_dy - xh * mean_dy_xhat);
                        }
                    }
                }
            }
            Op::Softmax {
                x,
                y,
                outer,
                len,
                inner,
            } => {
                if let Some(gx) = accumulate(grads, x, g.len()) {
                    let yv = y.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0f32;
                            for j in 0..len {
                                dot += g[base + j * inner] * yv[base + j * inner];
                            }
                            for j in 0..len {
                                let at = base + j * inner;
                                gx[at] += yv[at] * (g[at] - dot);
                            }
                        }
                    }
                }
            }
            Op::Permute { a, out_shape, perm } => {
                if let Some(ga) = accumulate(grads, a, g.len()) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (back, _) = permute_data(g, &out_shape, &inv);
                    add_into(ga, &back);
                }
            }
            Op::Concat {
                inputs,
                outer,
                inner,
                total,
            } => {
                let mut offset = 0;
                for (input, size) in inputs {
                    if let Some(gi) = accumulate(grads, input, outer * size * inner) {
                        let chunk = size * inner;
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset * inner..][..chunk];
                            add_into(&mut gi[o * chunk..(o + 1) * chunk], src);
                        }
                    }
                    offset += size;
                }
            }
            Op::Slice {
                a,
                in_len,
                outer,
                inner,
                axis_len,
                start,
                len,
            } => {
                if let Some(ga) = accumulate(grads, a, in_len) {
                    let chunk = len * inner;
                    for o in 0..outer {
                        let dst = &mut ga[(o * axis_len + start) * inner..][..chunk];
                        add_into(dst, &g[o * chunk..(o + 1) * chunk]);
                    }
                }
            }
            Op::RemapHw {
                a,
                in_shape,
                rows,
                cols,
            } => {
                let [n, h, w, c] = in_shape;
                if let Some(ga) = accumulate(grads, a, n * h * w * c) {
                    let (ho, wo) = (rows.len(), cols.len());
                    for b in 0..n {
                        for (i, &r) in rows.iter().enumerate() {
                            for (j, &cc) in cols.iter().enumerate() {
                                let src = &g[((b * ho + i) * wo + j) * c..][..c];
                                let dst = &mut ga[((b * h + r) * w + cc) * c..][..c];
                                add_into(dst, src);
                            }
                        }
                    }
                }
            }
            Op::IndexSelect {
                a,
                in_len,
                width,
                index,
            } => {
                if let Some(ga) = accumulate(grads, a, in_len) {
                    for (i, &r) in index.iter().enumerate() {
                        add_into(&mut ga[r * width..(r + 1) * width], &g[i * width..(i + 1) * width]);
                    }
                }
            }
            Op::Sum(a, len) => {
                if let Some(ga) = accumulate(grads, a, len) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a, len) => {
                if let Some(ga) = accumulate(grads, a, len) {
                    let s = g[0] / len as f32;
                    ga.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::NormalizePairs { a, y, inv_r, plane } => {
                if let Some(ga) = accumulate(grads, a, g.len()) {
                    let yv = y.data();
                    for (p, &ir) in inv_r.iter().enumerate() {
                        let (nc, px) = (p / plane, p % plane);
                        let ci = (2 * nc) * plane + px;
                        let si = ci + plane;
                        let dot = g[ci] * yv[ci] + g[si] * yv[si];
                        ga[ci] += (g[ci] - yv[ci] * dot) * ir;
                        ga[si] += (g[si] - yv[si] * dot) * ir;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn matmul_backward(
    g: &[f32],
    grads: &mut [Option<Vec<f32>>],
    a: Input,
    b: Input,
    av: &Tensor,
    bv: &Tensor,
    trans_b: bool,
    d: MatmulDims,
) {
    let MatmulDims { batch, m, n, k, a_batched, b_batched } = d;
    if let Some(ga) = accumulate(grads, a, av.numel()) {
        if a_batched && !b_batched {
            // dA = dC · op(B)ᵀ
            gemm(batch * m, k, n, g, false, bv.data(), !trans_b, ga, true);
        } else {
            for i in 0..batch {
                let ao = if a_batched { i * m * k } else { 0 };
                let bo = if b_batched { i * k * n } else { 0 };
                gemm(
                    m,
                    k,
                    n,
                    &g[i * m * n..(i + 1) * m * n],
                    false,
                    &bv.data()[bo..bo + k * n],
                    !trans_b,
                    &mut ga[ao..ao + m * k],
                    true,
                );
            }
        }
    }
    if let Some(gb) = accumulate(grads, b, bv.numel()) {
        if a_batched && !b_batched {
            if trans_b {
                // dB[n,k] = dCᵀ · A
                gemm(n, k, batch * m, g, true, av.data(), false, gb, true);
            } else {
                gemm(k, n, batch * m, av.data(), true, g, false, gb, true);
            }
        } else {
            for i in 0..batch {
                let ao = if a_batched { i * m * k } else { 0 };
                let bo = if b_batched { i * k * n } else { 0 };
                let gi = &g[i * m * n..(i + 1) * m * n];
                let ai = &av.data()[ao..ao + m * k];
                let dst = &mut gb[bo..bo + k * n];
                if trans_b {
                    gemm(n, k, m, gi, true, ai, false, dst, true);
                } else {
                    gemm(k, n, m, ai, true, gi, false, dst, true);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    g: &[f32],
    grads: &mut [Option<Vec<f32>>],
    x: Input,
    w: Input,
    bias: Option<Input>,
    xv: &Tensor,
    wv: &Tensor,
    padding: Padding,
) {
    let [n, c, h, wd] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
    let [o, _, kh, kw] = [wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]];
    let hw = h * wd;
    let ckk = c * kh * kw;
    if let Some(bias) = bias {
        if let Some(gb) = accumulate(grads, bias, o) {
            for b in 0..n {
                for (oc, acc) in gb.iter_mut().enumerate() {
                    *acc += g[(b * o + oc) * hw..][..hw].iter().sum::<f32>();
                }
            }
        }
    }
    let need_w = w.requires_grad;
    let need_x = x.requires_grad;
    if need_w {
        let gw = accumulate(grads, w, wv.numel()).unwrap();
        for b in 0..n {
            let col = im2col(&xv.data()[b * c * hw..(b + 1) * c * hw], c, h, wd, kh, kw, padding);
            gemm(o, ckk, hw, &g[b * o * hw..(b + 1) * o * hw], false, &col, true, gw, true);
        }
    }
    if need_x {
        let gx = accumulate(grads, x, xv.numel()).unwrap();
        let mut dcol = vec![0.0; ckk * hw];
        for b in 0..n {
            gemm(ckk, hw, o, wv.data(), true, &g[b * o * hw..(b + 1) * o * hw], false, &mut dcol, false);
            col2im_add(&dcol, c, h, wd, kh, kw, padding, &mut gx[b * c * hw..(b + 1) * c * hw]);
        }
    }
}

impl Tape {
    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("add", a, b)?;
        let v = zip_map(a.value(), b.value(), |x, y| x + y);
        Ok(self.push(v, a.requires_grad || b.requires_grad, || Op::Add(a.into(), b.into())))
    }

    pub fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("sub", a, b)?;
        let v = zip_map(a.value(), b.value(), |x, y| x - y);
        Ok(self.push(v, a.requires_grad || b.requires_grad, || Op::Sub(a.into(), b.into())))
    }

    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("mul", a, b)?;
        let v = zip_map(a.value(), b.value(), |x, y| x * y);
        Ok(self.push(v, a.requires_grad || b.requires_grad, || {
            Op::Mul(a.into(), b.into(), a.value.clone(), b.value.clone())
        }))
    }

    pub fn div(&mut self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("div", a, b)?;
        let v = zip_map(a.value(), b.value(), |x, y| x / y);
        Ok(self.push(v, a.requires_grad || b.requires_grad, || {
            Op::Div(a.into(), b.into(), a.value.clone(), b.value.clone())
        }))
    }

    pub fn add_scalar(&mut self, a: &Var, c: f32) -> Var {
        let v = a.value().map(|x| x + c);
        self.push(v, a.requires_grad, || Op::Identity(a.into()))
    }

    pub fn mul_scalar(&mut self, a: &Var, c: f32) -> Var {
        let v = a.value().map(|x| x * c);
        self.push(v, a.requires_grad, || Op::MulScalar(a.into(), c))
    }

    pub fn div_scalar(&mut self, a: &Var, c: f32) -> Var {
        let v = a.value().map(|x| x / c);
        self.push(v, a.requires_grad, || Op::MulScalar(a.into(), 1.0 / c))
    }

    /// `a + b` where `b` broadcasts against `a` (right-aligned axes, extents
    /// equal or 1). The result has `a`'s shape.
    pub fn add_broadcast(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let bst = broadcast_strides(a.shape(), b.shape()).ok_or_else(|| Error::ShapeMismatch {
            op: "add_broadcast",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })?;
        let mut out = a.value().data().to_vec();
        let row = *a.shape().last().unwrap();
        let bs = *bst.last().unwrap();
        let bd = b.value().data();
        for_each_row(a.shape(), &bst, |ao, bo| {
            let dst = &mut out[ao..ao + row];
            if bs == 0 {
                let v = bd[bo];
                dst.iter_mut().for_each(|d| *d += v);
            } else {
                add_into(dst, &bd[bo..bo + row]);
            }
        });
        let v = Tensor::from_parts(a.shape().to_vec(), out);
        Ok(self.push(v, a.requires_grad || b.requires_grad, || Op::AddBroadcast {
            a: a.into(),
            b: b.into(),
            a_shape: a.shape().to_vec(),
            b_strides: bst,
            b_len: b.value().numel(),
        }))
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, a: &Var) -> Var {
        let v = a.value().map(gelu_fwd);
        self.push(v, a.requires_grad, || Op::Gelu(a.into(), a.value.clone()))
    }

    /// Elementwise absolute value (subgradient 0 at 0).
    pub fn abs(&mut self, a: &Var) -> Var {
        let v = a.value().map(f32::abs);
        self.push(v, a.requires_grad, || Op::Abs(a.into(), a.value.clone()))
    }

    /// `[..., m, k] × [..., k, n]`; a rank-2 operand broadcasts over the
    /// other's leading axes.
    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[..., m, k] × [..., n, k]ᵀ`.
    pub fn matmul_nt(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: &Var, b: &Var, trans_b: bool) -> Result<Var> {
        let (dims, shape) = matmul_dims("matmul", a.shape(), b.shape(), trans_b)?;
        let data = matmul_forward(a.value().data(), b.value().data(), dims, trans_b);
        let v = Tensor::from_parts(shape, data);
        Ok(self.push(v, a.requires_grad || b.requires_grad, || Op::Matmul {
            a: a.into(),
            b: b.into(),
            av: a.value.clone(),
            bv: b.value.clone(),
            trans_b,
            dims,
        }))
    }

    /// Stride-1 "same" 2-D convolution of `x[N, C, H, W]` with
    /// `w[O, C, kh, kw]` (odd kernel extents) and optional `bias[O]`.
    pub fn conv2d(&mut self, x: &Var, w: &Var, bias: Option<&Var>, padding: Padding) -> Result<Var> {
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let [n, c, h, wd] = [xs[0], xs[1], xs[2], xs[3]];
        let [o, _, kh, kw] = [ws[0], ws[1], ws[2], ws[3]];
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: ws.to_vec(),
                reason: "kernel extents must be odd",
            });
        }
        if padding == Padding::Reflect && (kh / 2 >= h || kw / 2 >= wd) {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: xs.to_vec(),
                reason: "reflect padding needs the image larger than the kernel radius",
            });
        }
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![o],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let hw = h * wd;
        let ckk = c * kh * kw;
        let mut out = vec![0.0; n * o * hw];
        for b in 0..n {
            let col = im2col(&x.value().data()[b * c * hw..(b + 1) * c * hw], c, h, wd, kh, kw, padding);
            let dst = &mut out[b * o * hw..(b + 1) * o * hw];
            gemm(o, hw, ckk, w.value().data(), false, &col, false, dst, false);
            if let Some(bias) = bias {
                for (oc, &bv) in bias.value().data().iter().enumerate() {
                    dst[oc * hw..(oc + 1) * hw].iter_mut().for_each(|d| *d += bv);
                }
            }
        }
        let v = Tensor::from_parts(vec![n, o, h, wd], out);
        let rg = x.requires_grad || w.requires_grad || bias.is_some_and(|b| b.requires_grad);
        Ok(self.push(v, rg, || Op::Conv2d {
            x: x.into(),
            w: w.into(),
            bias: bias.map(Input::from),
            xv: x.value.clone(),
            wv: w.value.clone(),
            padding,
        }))
    }

    /// Normalizes over the last axis with population variance, then applies
    /// `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: f32) -> Result<Var> {
        let d = *x.shape().last().unwrap();
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let rows = x.value().numel() / d;
        let mut xhat = Vec::with_capacity(x.value().numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.value().numel());
        let (gv, bv) = (gamma.value().data(), beta.value().data());
        for row in x.value().data().chunks_exact(d) {
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for ((&v, &gm), &bt) in row.iter().zip(gv).zip(bv) {
                let xh = (v - mean) * rs;
                xhat.push(xh);
                out.push(gm * xh + bt);
            }
        }
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        let rg = x.requires_grad || gamma.requires_grad || beta.requires_grad;
        Ok(self.push(v, rg, || Op::LayerNorm {
            x: x.into(),
            gamma: gamma.into(),
            beta: beta.into(),
            xhat,
            rstd,
            gv: gamma.value.clone(),
        }))
    }

    /// Softmax along `axis`, stabilized by subtracting the running maximum.
    pub fn softmax(&mut self, x: &Var, axis: usize) -> Result<Var> {
        let rank = x.shape().len();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let xd = x.value().data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f32::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(xd[base + j * inner]);
                }
                let mut sum = 0.0f32;
                for j in 0..len {
                    let e = (xd[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                let inv = 1.0 / sum;
                for j in 0..len {
                    out[base + j * inner] *= inv;
                }
            }
        }
        let y = Rc::new(Tensor::from_parts(x.shape().to_vec(), out));
        let saved = y.clone();
        Ok(self.push_rc(y, x.requires_grad, || Op::Softmax {
            x: x.into(),
            y: saved,
            outer,
            len,
            inner,
        }))
    }

    pub fn reshape(&mut self, a: &Var, shape: &[usize]) -> Result<Var> {
        let v = (*a.value).clone().reshape(shape)?;
        Ok(self.push(v, a.requires_grad, || Op::Identity(a.into())))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: &Var, perm: &[usize]) -> Result<Var> {
        let rank = a.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank {
            return Err(Error::InvalidShape {
                op: "permute",
                shape: a.shape().to_vec(),
                reason: "permutation length differs from rank",
            });
        }
        for &p in perm {
            if p >= rank || seen[p] {
                return Err(Error::InvalidAxis { axis: p, rank });
            }
            seen[p] = true;
        }
        let (data, shape) = permute_data(a.value().data(), a.shape(), perm);
        let out_shape = shape.clone();
        let v = Tensor::from_parts(shape, data);
        Ok(self.push(v, a.requires_grad, || Op::Permute {
            a: a.into(),
            out_shape,
            perm: perm.to_vec(),
        }))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[&Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(Error::InvalidShape {
            op: "concat",
            shape: Vec::new(),
            reason: "nothing to concatenate",
        })?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        for p in parts {
            let ok = p.shape().len() == rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                data.extend_from_slice(&p.value().data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let v = Tensor::from_parts(shape, data);
        let rg = parts.iter().any(|p| p.requires_grad);
        Ok(self.push(v, rg, || Op::Concat {
            inputs: parts.iter().map(|p| (Input::from(*p), p.shape()[axis])).collect(),
            outer,
            inner,
            total,
        }))
    }

    /// The `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: &Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let rank = a.shape().len();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let (outer, axis_len, inner) = split_axis(a.shape(), axis);
        if len == 0 || start + len > axis_len {
            return Err(Error::InvalidShape {
                op: "slice",
                shape: a.shape().to_vec(),
                reason: "slice range out of bounds",
            });
        }
        let chunk = len * inner;
        let mut data = Vec::with_capacity(outer * chunk);
        for o in 0..outer {
            data.extend_from_slice(&a.value().data()[(o * axis_len + start) * inner..][..chunk]);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        let v = Tensor::from_parts(shape, data);
        Ok(self.push(v, a.requires_grad, || Op::Slice {
            a: a.into(),
            in_len: a.value().numel(),
            outer,
            inner,
            axis_len,
            start,
            len,
        }))
    }

    /// Spatial gather on `x[N, H, W, C]`: `out[n, i, j] = x[n, rows[i], cols[j]]`.
    /// Covers cyclic shifts, reflect padding and crops.
    pub fn remap_hw(&mut self, x: &Var, rows: &[usize], cols: &[usize]) -> Result<Var> {
        let s = x.shape();
        if s.len() != 4 || rows.iter().any(|&r| r >= s[1]) || cols.iter().any(|&c| c >= s[2]) || rows.is_empty() || cols.is_empty() {
            return Err(Error::InvalidShape {
                op: "remap_hw",
                shape: s.to_vec(),
                reason: "expects [N, H, W, C] and in-range indices",
            });
        }
        let [n, h, w, c] = [s[0], s[1], s[2], s[3]];
        let xd = x.value().data();
        let mut data = Vec::with_capacity(n * rows.len() * cols.len() * c);
        for b in 0..n {
            for &r in rows {
                for &cc in cols {
                    data.extend_from_slice(&xd[((b * h + r) * w + cc) * c..][..c]);
                }
            }
        }
        let v = Tensor::from_parts(vec![n, rows.len(), cols.len(), c], data);
        Ok(self.push(v, x.requires_grad, || Op::RemapHw {
            a: x.into(),
            in_shape: [n, h, w, c],
            rows: rows.to_vec(),
            cols: cols.to_vec(),
        }))
    }

    /// Gathers rows of a `[R, D]` table: output `[index.len(), D]`.
    pub fn index_select(&mut self, table: &Var, index: &[usize]) -> Result<Var> {
        let s = table.shape();
        if s.len() != 2 || index.iter().any(|&i| i >= s[0]) || index.is_empty() {
            return Err(Error::InvalidShape {
                op: "index_select",
                shape: s.to_vec(),
                reason: "expects a rank-2 table and in-range row indices",
            });
        }
        let width = s[1];
        let td = table.value().data();
        let mut data = Vec::with_capacity(index.len() * width);
        for &i in index {
            data.extend_from_slice(&td[i * width..(i + 1) * width]);
        }
        let v = Tensor::from_parts(vec![index.len(), width], data);
        Ok(self.push(v, table.requires_grad, || Op::IndexSelect {
            a: table.into(),
            in_len: table.value().numel(),
            width,
            index: index.to_vec(),
        }))
    }

    pub fn sum(&mut self, a: &Var) -> Var {
        let s: f32 = a.value().data().iter().sum();
        self.push(Tensor::scalar(s), a.requires_grad, || Op::Sum(a.into(), a.value().numel()))
    }

    pub fn mean(&mut self, a: &Var) -> Var {
        let n = a.value().numel();
        let s: f32 = a.value().data().iter().sum::<f32>() / n as f32;
        self.push(Tensor::scalar(s), a.requires_grad, || Op::Mean(a.into(), n))
    }

    /// Rescales each (cos, sin) channel pair of `x[N, 2E, H, W]` to unit
    /// length. A zero pair maps to `(1, 0)` with zero gradient.
    pub fn normalize_pairs(&mut self, x: &Var) -> Result<Var> {
        let s = x.shape();
        if s.len() != 4 || s[1] % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "normalize_pairs",
                shape: s.to_vec(),
                reason: "expects [N, 2E, H, W]",
            });
        }
        let plane = s[2] * s[3];
        let pairs = s[0] * s[1] / 2;
        let xd = x.value().data();
        let mut out = vec![0.0; xd.len()];
        let mut inv_r = Vec::with_capacity(pairs * plane);
        for p in 0..pairs {
            for px in 0..plane {
                let ci = 2 * p * plane + px;
                let si = ci + plane;
                let (c, sn) = unit_pair(xd[ci], xd[si]);
                out[ci] = c;
                out[si] = sn;
                let r = (xd[ci] as f64).hypot(xd[si] as f64);
                inv_r.push(if r > 0.0 { (1.0 / r) as f32 } else { 0.0 });
            }
        }
        let y = Rc::new(Tensor::from_parts(s.to_vec(), out));
        let saved = y.clone();
        Ok(self.push_rc(y, x.requires_grad, || Op::NormalizePairs {
            a: x.into(),
            y: saved,
            inv_r,
            plane,
        }))
    }
}

/// Unit-length version of the pair `(c, s)`, computed in double precision.
/// A zero pair maps to `(1, 0)`.
pub fn unit_pair(c: f32, s: f32) -> (f32, f32) {
    let r = (c as f64).hypot(s as f64);
    if r > 0.0 {
        ((c as f64 / r) as f32, (s as f64 / r) as f32)
    } else {
        (1.0, 0.0)
    }
}
