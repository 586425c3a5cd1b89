//! Finite-difference checks of every differentiable operation, the Swin
//! building blocks, the loss and the full network at toy size.

use cstn_core::gradcheck::{check, random_tensor, GradCheck, Probes};
use cstn_core::model::{forward, CstnConfig, CstnWeights};
use cstn_core::swin::{
    relative_position_bias, rstb_forward, rstb_zeros, swin_layer, window_attention, window_partition, window_reverse, Rstb,
    RstbConfig, SwinGeometry,
};
use cstn_core::train::l1_loss;
use cstn_core::{Padding, Result as CoreResult, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct OpResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Case = (&'static str, fn(&mut ChaCha8Rng) -> CoreResult<GradCheck>);

fn rand(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    random_tensor(shape, rng)
}

/// Uniform in `±[lo, 1)`, so kinks at zero stay out of the stencil.
fn away_from_zero(shape: &[usize], lo: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(lo..1.0f32);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Interleaved unit cos/sin pairs over `pairs` channel pairs.
fn unit_pairs(n: usize, pairs: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let plane = h * w;
    let angles: Vec<f32> = (0..n * pairs * plane).map(|_| rng.random_range(-3.1f32..3.1)).collect();
    Tensor::from_fn(&[n, 2 * pairs, h, w], |i| {
        let (b, c, px) = (i / (2 * pairs * plane), (i / plane) % (2 * pairs), i % plane);
        let a = angles[(b * pairs + c / 2) * plane + px];
        if c % 2 == 0 {
            a.cos()
        } else {
            a.sin()
        }
    })
}

fn unary(rng: &mut ChaCha8Rng, f: fn(&mut Tape, &Var) -> CoreResult<Var>) -> CoreResult<GradCheck> {
    let x = rand(&[2, 3, 4], rng);
    check(&[x], Probes::All, 1, move |t, v| f(t, &v[0]))
}

fn binary(rng: &mut ChaCha8Rng, f: fn(&mut Tape, &Var, &Var) -> CoreResult<Var>) -> CoreResult<GradCheck> {
    let a = rand(&[3, 4], rng);
    let b = away_from_zero(&[3, 4], 0.3, rng);
    check(&[a, b], Probes::All, 2, move |t, v| f(t, &v[0], &v[1]))
}

fn rstb_cfg() -> RstbConfig {
    RstbConfig {
        depth: 2,
        num_heads: 2,
        embed_dim: 8,
        mlp_ratio: 2,
        window_size: 4,
    }
}

fn random_rstb(cfg: &RstbConfig, scale: f32, rng: &mut ChaCha8Rng) -> Rstb<Tensor> {
    rstb_zeros(cfg).map("", &mut |name, t| {
        let base = if name.ends_with("gamma") { 1.0 } else { 0.0 };
        Tensor::from_fn(t.shape(), |_| base + scale * rng.random_range(-1.0f32..1.0))
    })
}

fn flatten_rstb(w: &Rstb<Tensor>) -> Vec<Tensor> {
    let mut out = Vec::new();
    w.map("", &mut |_, t| out.push(t.clone()));
    out
}

fn rebuild_rstb(w: &Rstb<Tensor>, vars: &[Var]) -> Rstb<Var> {
    let mut it = vars.iter();
    w.map("", &mut |_, _| it.next().unwrap().clone())
}

/// Toy network: 32×32, embed 16, two RSTBs of depth 2.
pub fn toy_config() -> CstnConfig {
    CstnConfig {
        num_rstb: 2,
        rstb: RstbConfig {
            depth: 2,
            num_heads: 2,
            embed_dim: 16,
            mlp_ratio: 2,
            window_size: 8,
        },
        in_echoes: 2,
        target_size: (32, 32),
        shallow_channels: 8,
        head_channels: 8,
    }
}

fn full_network(rng: &mut ChaCha8Rng) -> CoreResult<GradCheck> {
    let cfg = toy_config();
    let w = CstnWeights::zeros(&cfg)?.map(&mut |name, t| {
        let base = if name.ends_with("gamma") { 1.0 } else { 0.0 };
        Tensor::from_fn(t.shape(), |_| base + 0.1 * rng.random_range(-1.0f32..1.0))
    });
    let (h, wd) = cfg.target_size;
    let mag = Tensor::from_fn(&[1, cfg.in_echoes, h, wd], |_| rng.random_range(0.0f32..1.0));
    let phase = unit_pairs(1, cfg.in_echoes, h, wd, rng);
    let mut inputs = vec![mag, phase];
    w.visit(|_, t| inputs.push(t.clone()));
    check(&inputs, Probes::Sample(3), 11, |tape, v| {
        let mut it = v[2..].iter();
        let bound = w.map(&mut |_, _| it.next().unwrap().clone());
        let (hm, hp) = forward(tape, &v[0], &v[1], &cfg, &bound)?;
        tape.concat(&[&hm, &hp], 1)
    })
}

fn cases() -> Vec<Case> {
    vec![
        ("add", |r| binary(r, |t, a, b| t.add(a, b))),
        ("sub", |r| binary(r, |t, a, b| t.sub(a, b))),
        ("mul", |r| binary(r, |t, a, b| t.mul(a, b))),
        ("div", |r| binary(r, |t, a, b| t.div(a, b))),
        ("add_scalar", |r| unary(r, |t, a| Ok(t.add_scalar(a, 0.7)))),
        ("mul_scalar", |r| unary(r, |t, a| Ok(t.mul_scalar(a, -1.3)))),
        ("div_scalar", |r| unary(r, |t, a| Ok(t.div_scalar(a, 2.5)))),
        ("add_broadcast", |r| {
            let inputs = [rand(&[2, 3, 4], r), rand(&[3, 1], r)];
            check(&inputs, Probes::All, 3, |t, v| t.add_broadcast(&v[0], &v[1]))
        }),
        ("gelu", |r| unary(r, |t, a| Ok(t.gelu(a)))),
        ("abs", |r| {
            let x = away_from_zero(&[2, 3, 4], 0.05, r);
            check(&[x], Probes::All, 4, |t, v| Ok(t.abs(&v[0])))
        }),
        ("matmul", |r| {
            let inputs = [rand(&[2, 3, 4], r), rand(&[2, 4, 5], r)];
            check(&inputs, Probes::All, 5, |t, v| t.matmul(&v[0], &v[1]))
        }),
        ("matmul_nt", |r| {
            let inputs = [rand(&[2, 3, 4], r), rand(&[2, 5, 4], r)];
            check(&inputs, Probes::All, 6, |t, v| t.matmul_nt(&v[0], &v[1]))
        }),
        ("conv2d (zero padding)", |r| {
            let inputs = [rand(&[2, 2, 5, 4], r), rand(&[3, 2, 3, 3], r), rand(&[3], r)];
            check(&inputs, Probes::All, 7, |t, v| t.conv2d(&v[0], &v[1], Some(&v[2]), Padding::Zeros))
        }),
        ("conv2d (reflect padding)", |r| {
            let inputs = [rand(&[1, 2, 5, 4], r), rand(&[3, 2, 3, 3], r)];
            check(&inputs, Probes::All, 8, |t, v| t.conv2d(&v[0], &v[1], None, Padding::Reflect))
        }),
        ("layer_norm", |r| {
            let inputs = [rand(&[3, 4, 6], r), rand(&[6], r), rand(&[6], r)];
            check(&inputs, Probes::All, 9, |t, v| t.layer_norm(&v[0], &v[1], &v[2], 1e-5))
        }),
        ("softmax", |r| {
            let x = rand(&[2, 3, 5], r);
            check(&[x], Probes::All, 10, |t, v| {
                let a = t.softmax(&v[0], 2)?;
                let b = t.softmax(&v[0], 1)?;
                t.concat(&[&a, &b], 0)
            })
        }),
        ("reshape", |r| unary(r, |t, a| t.reshape(a, &[4, 6]))),
        ("permute", |r| unary(r, |t, a| t.permute(a, &[2, 0, 1]))),
        ("concat", |r| {
            let inputs = [rand(&[2, 3, 4], r), rand(&[2, 1, 4], r)];
            check(&inputs, Probes::All, 11, |t, v| t.concat(&[&v[0], &v[1]], 1))
        }),
        ("slice", |r| unary(r, |t, a| t.slice(a, 2, 1, 2))),
        ("remap_hw", |r| {
            let x = rand(&[1, 4, 3, 2], r);
            check(&[x], Probes::All, 12, |t, v| t.remap_hw(&v[0], &[3, 0, 0, 2], &[1, 0, 1]))
        }),
        ("index_select", |r| {
            let x = rand(&[5, 2], r);
            check(&[x], Probes::All, 13, |t, v| t.index_select(&v[0], &[4, 0, 4, 2]))
        }),
        ("sum", |r| unary(r, |t, a| Ok(t.sum(a)))),
        ("mean", |r| unary(r, |t, a| Ok(t.mean(a)))),
        ("normalize_pairs", |r| {
            let x = unit_pairs(2, 2, 3, 3, r).map(|v| 1.5 * v);
            check(&[x], Probes::All, 14, |t, v| t.normalize_pairs(&v[0]))
        }),
        ("window_partition/reverse", |r| {
            let x = rand(&[1, 8, 4, 3], r);
            check(&[x], Probes::All, 15, |t, v| {
                let w = window_partition(t, &v[0], 4)?;
                let w = t.mul(&w, &w)?;
                window_reverse(t, &w, 4, 8, 4)
            })
        }),
        ("relative_position_bias", |r| {
            let table = rand(&[9, 2], r);
            check(&[table], Probes::All, 16, |t, v| relative_position_bias(t, &v[0], 2))
        }),
        ("window_attention", |r| {
            let cfg = rstb_cfg();
            let w = random_rstb(&cfg, 0.4, r);
            let x = rand(&[2, 16, 8], r);
            let attn = w.layers[0].attn.clone();
            let mut inputs = vec![x];
            attn.map("", &mut |_, t| inputs.push(t.clone()));
            check(&inputs, Probes::Sample(24), 17, |t, v| {
                let mut it = v[1..].iter();
                let a = attn.map("", &mut |_, _| it.next().unwrap().clone());
                let bias = relative_position_bias(t, &a.bias_table, 4)?;
                window_attention(t, &v[0], &a, 2, &bias, None)
            })
        }),
        ("swin_layer (shifted)", |r| {
            let cfg = rstb_cfg();
            let w = random_rstb(&cfg, 0.4, r);
            let mut inputs = vec![rand(&[1, 8, 8, 8], r)];
            inputs.extend(flatten_rstb(&w));
            check(&inputs, Probes::Sample(16), 18, |t, v| {
                let geo = SwinGeometry::new(t, 8, 8, &cfg)?;
                let b = rebuild_rstb(&w, &v[1..]);
                swin_layer(t, &v[0], &b.layers[1], &cfg, &geo, true)
            })
        }),
        ("rstb", |r| {
            let cfg = rstb_cfg();
            let w = random_rstb(&cfg, 0.4, r);
            let mut inputs = vec![rand(&[1, 8, 6, 6], r)];
            inputs.extend(flatten_rstb(&w));
            check(&inputs, Probes::Sample(16), 19, |t, v| {
                let geo = SwinGeometry::new(t, 6, 6, &cfg)?;
                let b = rebuild_rstb(&w, &v[1..]);
                rstb_forward(t, &v[0], &b, &cfg, &geo)
            })
        }),
        ("l1_loss", |r| {
            let inputs = [
                rand(&[1, 2, 3, 3], r),
                rand(&[1, 4, 3, 3], r),
                rand(&[1, 2, 3, 3], r),
                rand(&[1, 4, 3, 3], r),
            ];
            // Keep every residual clear of the kink at zero.
            let mut inputs = inputs.to_vec();
            let shift = |t: &Tensor, o: &Tensor| -> Tensor {
                Tensor::from_fn(t.shape(), |i| {
                    let d = t.data()[i] - o.data()[i];
                    if d.abs() < 0.05 {
                        o.data()[i] + 0.05f32.copysign(d)
                    } else {
                        t.data()[i]
                    }
                })
            };
            inputs[0] = shift(&inputs[0], &inputs[2]);
            inputs[1] = shift(&inputs[1], &inputs[3]);
            check(&inputs, Probes::All, 20, |t, v| l1_loss(t, &v[0], &v[1], &v[2], &v[3], 1.0, 0.5))
        }),
        ("cstn (32x32, embed 16, 2 RSTBs)", full_network),
    ]
}

pub fn names() -> Vec<&'static str> {
    cases().into_iter().map(|(n, _)| n).collect()
}

/// Runs every check; `progress` sees each result as it completes.
pub fn run(mut progress: impl FnMut(&OpResult)) -> CoreResult<Vec<OpResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6763);
    let mut out = Vec::new();
    for (name, f) in cases() {
        let res = f(&mut rng)?;
        let r = OpResult {
            name,
            max_rel_error: res.max_rel_error(),
            passed: res.passed(),
        };
        progress(&r);
        out.push(r);
    }
    Ok(out)
}
