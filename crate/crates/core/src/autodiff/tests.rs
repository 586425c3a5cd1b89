use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{check, random_tensor, Probes};

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn assert_close(a: &[f32], b: &[f32], tol: f32) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2], &[1.0, 2.0]));
    let b = tape.constant(t(&[2], &[3.0, 4.0]));
    assert_eq!(tape.add(&a, &b).unwrap().value().data(), &[4.0, 6.0]);
    let x = tape.constant(t(&[3], &[0.1, -7.25, 3.0e5]));
    assert_eq!(tape.mul_scalar(&x, 1.0).value(), x.value());
}

#[test]
fn elementwise_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    let err = tape.sub(&a, &b).unwrap_err();
    assert_eq!(
        err,
        Error::ShapeMismatch {
            op: "sub",
            lhs: vec![2, 3],
            rhs: vec![3, 2]
        }
    );
    let msg = alloc::format!("{err}");
    assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"));
}

#[test]
fn grad_of_sum_of_squares() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
    let sq = tape.mul(&x, &x).unwrap();
    let loss = tape.sum(&sq);
    tape.backward(&loss).unwrap();
    assert_eq!(tape.grad(&x).data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    assert_eq!(tape.matmul(&a, &eye).unwrap().value(), a.value());
    let col = tape.constant(t(&[2, 1], &[5.0, 6.0]));
    assert_eq!(tape.matmul(&a, &col).unwrap().value().data(), &[17.0, 39.0]);
    let bad = tape.constant(Tensor::zeros(&[3, 1]));
    assert!(matches!(tape.matmul(&a, &bad), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn matmul_gradcheck() {
    let mut r = rng();
    let inputs = [random_tensor(&[4, 5], &mut r), random_tensor(&[5, 3], &mut r)];
    let res = check(&inputs, Probes::All, 1, |tape, v| tape.matmul(&v[0], &v[1])).unwrap();
    assert!(res.passed(), "{res:?}");
}

#[test]
fn batched_matmul_variants_gradcheck() {
    let mut r = rng();
    let inputs = [
        random_tensor(&[2, 3, 4, 5], &mut r),
        random_tensor(&[2, 3, 6, 5], &mut r),
        random_tensor(&[5, 6], &mut r),
    ];
    let res = check(&inputs, Probes::All, 2, |tape, v| {
        let s = tape.matmul_nt(&v[0], &v[1])?; // [2,3,4,6]
        let p = tape.matmul(&v[0], &v[2])?; // [2,3,4,6]
        tape.add(&s, &p)
    })
    .unwrap();
    assert!(res.passed(), "{res:?}");
}

#[test]
fn conv_identity_and_constant_preservation() {
    let mut r = rng();
    let mut tape = Tape::new();
    let x = tape.constant(random_tensor(&[1, 1, 5, 6], &mut r));
    let one = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let zero_b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(&x, &one, Some(&zero_b), Padding::Zeros).unwrap();
    assert_eq!(y.value(), x.value());

    let c = tape.constant(Tensor::full(&[1, 1, 7, 7], 0.625));
    let avg = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
    let y = tape.conv2d(&c, &avg, None, Padding::Reflect).unwrap();
    assert_close(y.value().data(), &[0.625; 49], 1e-6);
    // Zero fill darkens the border instead.
    let y = tape.conv2d(&c, &avg, None, Padding::Zeros).unwrap();
    assert!(y.value().data()[0] < 0.5);
}

#[test]
fn conv_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(
        tape.conv2d(&x, &w, None, Padding::Zeros),
        Err(Error::ShapeMismatch { op: "conv2d", .. })
    ));
}

#[test]
fn conv_gradcheck() {
    let mut r = rng();
    let inputs = [
        random_tensor(&[1, 2, 6, 6], &mut r),
        random_tensor(&[3, 2, 3, 3], &mut r),
        random_tensor(&[3], &mut r),
    ];
    for pad in [Padding::Zeros, Padding::Reflect] {
        let res = check(&inputs, Probes::All, 3, |tape, v| tape.conv2d(&v[0], &v[1], Some(&v[2]), pad)).unwrap();
        assert!(res.passed(), "{pad:?} {res:?}");
    }
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::full(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let x = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
    assert_eq!(tape.layer_norm(&x, &g, &b, 1e-5).unwrap().value().data(), &[0.0; 3]);

    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(t(&[2], &[0.0, 2.0]));
    let y = tape.layer_norm(&x, &g, &b, 1e-6).unwrap();
    assert_close(y.value().data(), &[-1.0, 1.0], 1e-5);
}

#[test]
fn layer_norm_gradcheck() {
    let mut r = rng();
    let inputs = [
        random_tensor(&[2, 4, 8], &mut r),
        random_tensor(&[8], &mut r),
        random_tensor(&[8], &mut r),
    ];
    let res = check(&inputs, Probes::All, 4, |tape, v| tape.layer_norm(&v[0], &v[1], &v[2], 1e-5)).unwrap();
    assert!(res.passed(), "{res:?}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[0.0, 0.0]));
    assert_eq!(tape.softmax(&x, 0).unwrap().value().data(), &[0.5, 0.5]);
    let x = tape.constant(t(&[2], &[3.0, 1003.0]));
    let y = tape.softmax(&x, 0).unwrap();
    assert!(y.value().is_finite());
    assert_close(y.value().data(), &[0.0, 1.0], 1e-6);
    assert!(matches!(tape.softmax(&x, 1), Err(Error::InvalidAxis { .. })));
}

#[test]
fn softmax_and_gelu_gradcheck() {
    let mut r = rng();
    let inputs = [random_tensor(&[3, 4, 5], &mut r)];
    for axis in 0..3 {
        let res = check(&inputs, Probes::All, 5, |tape, v| tape.softmax(&v[0], axis)).unwrap();
        assert!(res.passed(), "axis {axis}: {res:?}");
    }
    let res = check(&inputs, Probes::All, 6, |tape, v| Ok(tape.gelu(&v[0]))).unwrap();
    assert!(res.passed(), "{res:?}");
}

#[test]
fn gelu_values() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[0.0, 1.0, -1.0]));
    let y = tape.gelu(&x);
    // tanh-approximation reference values
    assert_close(y.value().data(), &[0.0, 0.841_192, -0.158_808], 1e-5);
}

#[test]
fn shape_ops_gradcheck() {
    let mut r = rng();
    let inputs = [
        random_tensor(&[2, 3, 4, 2], &mut r),
        random_tensor(&[2, 1, 4, 2], &mut r),
        random_tensor(&[5, 2], &mut r),
        random_tensor(&[1, 4, 1, 2], &mut r),
    ];
    let res = check(&inputs, Probes::All, 8, |tape, v| {
        let c = tape.concat(&[&v[0], &v[1]], 1)?; // [2,4,4,2]
        let p = tape.permute(&c, &[0, 2, 1, 3])?; // [2,4,4,2]
        let s = tape.slice(&p, 2, 1, 2)?; // [2,4,2,2]
        let m = tape.remap_hw(&s, &[3, 0, 0, 2], &[1, 0, 1])?; // [2,4,3,2]
        let g = tape.index_select(&v[2], &[4, 0, 4])?; // [3,2]
        let m = tape.add_broadcast(&m, &g)?;
        let m = tape.add_broadcast(&m, &v[3])?;
        let flat = tape.reshape(&m, &[2, 24])?;
        let sq = tape.mul(&flat, &flat)?;
        let d = tape.add_scalar(&sq, 2.0);
        tape.div(&flat, &d)
    })
    .unwrap();
    assert!(res.passed(), "{res:?}");
}

#[test]
fn normalize_pairs_gradcheck_and_values() {
    let mut r = rng();
    let inputs = [random_tensor(&[2, 4, 3, 3], &mut r)];
    let res = check(&inputs, Probes::All, 9, |tape, v| tape.normalize_pairs(&v[0])).unwrap();
    assert!(res.passed(), "{res:?}");

    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2, 1, 2], &[3.0, 0.0, 4.0, 0.0]));
    let y = tape.normalize_pairs(&x).unwrap();
    assert_close(y.value().data(), &[0.6, 1.0, 0.8, 0.0], 1e-7);
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[0.5, -1.0, 2.0]));
    let lonely = tape.param(t(&[2], &[1.0, 1.0]));
    let loss = tape.sum(&x);
    tape.backward(&loss).unwrap();
    assert_eq!(tape.grad(&x).data(), &[1.0, 1.0, 1.0]);
    assert_eq!(tape.grad(&lonely).data(), &[0.0, 0.0]);
    assert_eq!(tape.backward(&loss), Err(Error::TapeConsumed));
}

#[test]
fn backward_errors() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let y = tape.mul_scalar(&x, 2.0);
    assert!(matches!(tape.backward(&y), Err(Error::NonScalarLoss(_))));
    let mut empty = Tape::new();
    let leaf = empty.param(Tensor::scalar(1.0));
    assert_eq!(empty.backward(&leaf), Err(Error::EmptyTape));
}

#[test]
fn composite_pipeline_gradcheck() {
    let mut r = rng();
    let inputs = [
        random_tensor(&[1, 2, 5, 5], &mut r),
        random_tensor(&[4, 2, 3, 3], &mut r),
        random_tensor(&[4], &mut r),
        random_tensor(&[5], &mut r),
        random_tensor(&[5], &mut r),
    ];
    let res = check(&inputs, Probes::All, 10, |tape, v| {
        let y = tape.conv2d(&v[0], &v[1], Some(&v[2]), Padding::Zeros)?;
        let y = tape.layer_norm(&y, &v[3], &v[4], 1e-5)?;
        // A plain sum of softmax rows is constant; the checker's weighted
        // reduction keeps the gradient informative.
        tape.softmax(&y, 3)
    })
    .unwrap();
    assert!(res.passed(), "{res:?}");
}

#[test]
fn inference_tape_records_nothing() {
    let mut tape = Tape::inference();
    let x = tape.param(Tensor::full(&[4], 2.0));
    let y = tape.mul(&x, &x).unwrap();
    assert!(!y.requires_grad());
    assert!(tape.is_empty());
}

#[test]
fn large_bounded_inputs_stay_finite() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_fn(&[4, 8], |i| if i % 2 == 0 { 1e3 } else { -1e3 }));
    let g = tape.constant(Tensor::full(&[8], 1.0));
    let b = tape.constant(Tensor::zeros(&[8]));
    assert!(tape.softmax(&x, 1).unwrap().value().is_finite());
    assert!(tape.gelu(&x).value().is_finite());
    assert!(tape.layer_norm(&x, &g, &b, 1e-5).unwrap().value().is_finite());
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..4, 1..5)
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        data in prop::collection::vec(-50.0f32..50.0, 12),
        shift in -100.0f32..100.0,
    ) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3, 4], data.clone()).unwrap());
        let xs = tape.add_scalar(&x, shift);
        let y = tape.softmax(&x, 1).unwrap();
        let ys = tape.softmax(&xs, 1).unwrap();
        for row in y.value().data().chunks(4) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
        for (a, b) in y.value().data().iter().zip(ys.value().data()) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn permute_then_inverse_is_identity(shape in shape_strategy(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&shape, &mut r);
        let mut perm: Vec<usize> = (0..shape.len()).collect();
        perm.shuffle(&mut r);
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() { inv[p] = i; }
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let p = tape.permute(&v, &perm).unwrap();
        let back = tape.permute(&p, &inv).unwrap();
        prop_assert_eq!(back.value(), &x);
        let flat = tape.reshape(&v, &[x.numel()]).unwrap();
        let again = tape.reshape(&flat, &shape).unwrap();
        prop_assert_eq!(again.value(), &x);
    }
}
