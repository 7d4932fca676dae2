use super::kernels::{self, Pad2d};
use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y} (tol {tol})");
    }
}

#[test]
fn matmul_identity_and_hand_case() {
    let a = t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
    assert_eq!(Tensor::eye(3).matmul(&a).unwrap(), a);
    let b = t(&[2, 2], &[1., 2., 3., 4.]);
    let c = t(&[2, 1], &[0., 1.]);
    assert_eq!(b.matmul(&c).unwrap(), t(&[2, 1], &[2., 4.]));
}

#[test]
fn matmul_shape_mismatch() {
    let err = Tensor::ones(&[2, 3]).matmul(&Tensor::ones(&[2, 3])).unwrap_err();
    assert!(matches!(err, TensorError::Dimension { op: "matmul", .. }));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&[4, 5], &mut rng);
    let b = random(&[5, 3], &mut rng);
    let bb = b.clone();
    let r = grad_check(
        move |tp, x| {
            let bv = tp.constant(bb.clone())?;
            let y = tp.matmul(x, bv)?;
            tp.sum(y)
        },
        &a,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn matmul_broadcasts_batch_axes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[2, 1, 3, 4], &mut rng);
    let b = random(&[1, 3, 4, 2], &mut rng);
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), &[2, 3, 3, 2]);
    for i in 0..2 {
        for j in 0..3 {
            let ai = a.narrow(0, i, 1).unwrap().reshape(&[3, 4]).unwrap();
            let bj = b.narrow(1, j, 1).unwrap().reshape(&[4, 2]).unwrap();
            let cij = c.narrow(0, i, 1).unwrap().narrow(1, j, 1).unwrap();
            assert_eq!(ai.matmul(&bj).unwrap().data(), cij.data());
        }
    }
}

#[test]
fn softmax_uniform_and_stable() {
    let s = t(&[3], &[0., 0., 0.]).softmax(0).unwrap();
    assert_close(s.data(), &[1. / 3.; 3], 1e-15);
    let s = t(&[2], &[1000., 0.]).softmax(0).unwrap();
    assert!(s.all_finite());
    assert!((s.data()[0] - 1.0).abs() < 1e-15 && s.data()[1] < 1e-300);
}

#[test]
fn softmax_matches_extended_precision() {
    // tests/oracles/gen_oracles.py: softmax_123, softmax_123_grad
    let expect = [0.090030573170380457998, 0.24472847105479765247, 0.66524095577482188953];
    let expect_grad = [0.09604514583293235431, -0.47310763853503394817, 0.37706249270210159386];
    let tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1., 2., 3.]), true).unwrap();
    let s = tape.softmax(x, 0).unwrap();
    let w = tape.constant(t(&[3], &[1., -2., 0.5])).unwrap();
    let f = tape.mul(s, w).and_then(|p| tape.sum(p)).unwrap();
    tape.backward(f).unwrap();
    assert_close(tape.value(s).data(), &expect, 1e-15);
    assert_close(tape.grad(x).unwrap().data(), &expect_grad, 1e-15);
}

#[test]
fn softmax_along_inner_axis() {
    let x = t(&[2, 3], &[1., 5., 2., 0., 0., 3.]);
    let s = x.softmax(0).unwrap();
    for j in 0..3 {
        assert!((s.data()[j] + s.data()[3 + j] - 1.0).abs() < 1e-15);
    }
}

#[test]
fn layernorm_examples() {
    let g = Tensor::ones(&[4]);
    let b = Tensor::zeros(&[4]);
    let (y, _) = kernels::layernorm(&Tensor::full(&[1, 4], 3.5), &g, &b, 1e-5).unwrap();
    assert_close(y.data(), &[0.0; 4], 0.0);
    let (y, _) = kernels::layernorm(
        &t(&[1, 2], &[1., 3.]),
        &Tensor::ones(&[2]),
        &Tensor::zeros(&[2]),
        1e-14,
    )
    .unwrap();
    assert_close(y.data(), &[-1., 1.], 1e-12);
}

#[test]
fn layernorm_standardizes_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[5, 16], &mut rng);
    let (_, stats) = kernels::layernorm(&x, &Tensor::ones(&[16]), &Tensor::zeros(&[16]), 1e-12).unwrap();
    for row in stats.xhat.data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);
    }
}

#[test]
fn layernorm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[2, 8], &mut rng);
    let gamma = random(&[8], &mut rng);
    let beta = random(&[8], &mut rng);
    let w = random(&[2, 8], &mut rng);
    let r = grad_check(
        |tp, x| {
            let g = tp.constant(gamma.clone())?;
            let b = tp.constant(beta.clone())?;
            let wv = tp.constant(w.clone())?;
            let y = tp.layernorm(x, g, b, 1e-5)?;
            let y = tp.mul(y, wv)?;
            tp.sum(y)
        },
        &x,
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

/// Reference convolution: six nested loops, bias first, then taps in
/// (channel, row, column) order.
fn conv_reference(
    x: &Tensor,
    k: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let [c, h, w] = x.shape()[..] else { panic!() };
    let [o, _, kh, kw] = k.shape()[..] else { panic!() };
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = bias.map_or(0.0, |b| b.data()[oc]);
                for ic in 0..c {
                    for a in 0..kh {
                        for b in 0..kw {
                            let ii = (i * stride + a) as isize - pad as isize;
                            let jj = (j * stride + b) as isize - pad as isize;
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                continue;
                            }
                            acc += k.data()[((oc * c + ic) * kh + a) * kw + b]
                                * x.data()[(ic * h + ii as usize) * w + jj as usize];
                        }
                    }
                }
                out[(oc * oh + i) * ow + j] = acc;
            }
        }
    }
    Tensor::new(&[o, oh, ow], out).unwrap()
}

#[test]
fn conv2d_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[1, 4, 4], &mut rng);
    let id = Tensor::ones(&[1, 1, 1, 1]);
    assert_eq!(kernels::conv2d(&x, &id, None, 1, Pad2d::default()).unwrap(), x);

    let y = kernels::conv2d(&Tensor::ones(&[1, 5, 5]), &Tensor::ones(&[1, 1, 3, 3]), None, 1, Pad2d::default())
        .unwrap();
    assert_eq!(y, Tensor::full(&[1, 3, 3], 9.0));
}

#[test]
fn conv2d_matches_nested_loops_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = random(&[2, 6, 7], &mut rng);
    let k = random(&[3, 2, 3, 2], &mut rng);
    let b = random(&[3], &mut rng);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let got = kernels::conv2d(&x, &k, Some(&b), stride, Pad2d::uniform(pad)).unwrap();
        assert_eq!(got, conv_reference(&x, &k, Some(&b), stride, pad));
    }
}

#[test]
fn conv2d_kernel_too_large() {
    let err = kernels::conv2d(&Tensor::ones(&[1, 2, 2]), &Tensor::ones(&[1, 1, 3, 3]), None, 1, Pad2d::default())
        .unwrap_err();
    assert!(matches!(err, TensorError::Dimension { .. }));
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_t(y)> for stride-s, unpadded kernels
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[1, 2, 6, 6], &mut rng);
    let k = random(&[3, 2, 2, 2], &mut rng);
    let y = random(&[1, 3, 3, 3], &mut rng);
    let cx = kernels::conv2d(&x, &k, None, 2, Pad2d::default()).unwrap();
    // conv_transpose kernel layout is [C_in(of transpose), O, kh, kw]
    let ty = kernels::conv_transpose2d(&y, &k, None, 2).unwrap();
    let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-12);
}

#[test]
fn upsample_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[2, 3, 3], &mut rng);
    assert_eq!(kernels::upsample_bilinear(&x, 3, 3).unwrap(), x);
    let c = kernels::upsample_bilinear(&Tensor::full(&[1, 2, 3], 0.7), 5, 9).unwrap();
    assert_close(c.data(), &[0.7; 45], 1e-15);
}

#[test]
fn upsample_2x2_to_4x4_half_pixel() {
    // source coordinates for 2 -> 4: (d + 0.5) / 2 - 0.5 clamped at 0,
    // giving fractional offsets 0, 0.25, 0.75, 1 (upper tap clamped).
    let pos = [0.0, 0.25, 0.75, 1.0];
    let mut expect = Vec::new();
    for &ty in &pos {
        for &tx in &pos {
            // bilinear interpolation of [[0,1],[2,3]] is 2y + x
            expect.push(2.0 * ty + tx);
        }
    }
    let x = t(&[1, 2, 2], &[0., 1., 2., 3.]);
    let y = kernels::upsample_bilinear(&x, 4, 4).unwrap();
    assert_close(y.data(), &expect, 1e-15);
}

#[test]
fn upsample_rejects_downsampling() {
    let err = kernels::upsample_bilinear(&Tensor::ones(&[1, 4, 4]), 2, 4).unwrap_err();
    assert!(matches!(err, TensorError::Unsupported(_)));
}

#[test]
fn elementwise_examples() {
    assert_eq!(kernels::sigmoid(0.0), 0.5);
    assert_eq!(kernels::gelu(0.0), 0.0);
    assert!(kernels::softplus(800.0).is_finite());
}

#[test]
fn composed_chain_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = random(&[3, 4], &mut rng);
    let c = random(&[4], &mut rng);
    let m = random(&[3, 4], &mut rng);
    let r = grad_check(
        |tp, x| {
            let cv = tp.constant(c.clone())?;
            let mv = tp.constant(m.clone())?;
            let y = tp.add(x, cv)?;
            let y = tp.mul(y, mv)?;
            let y = tp.gelu(y)?;
            tp.sum(y)
        },
        &x,
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn broadcast_rules() {
    let a = Tensor::ones(&[2, 3]);
    assert_eq!(a.add(&Tensor::ones(&[1, 3])).unwrap().shape(), &[2, 3]);
    assert_eq!(a.add(&Tensor::ones(&[3])).unwrap().shape(), &[2, 3]);
    assert!(a.add(&Tensor::ones(&[2])).is_err());
    assert!(a.mul(&Tensor::ones(&[3, 3])).is_err());
}

#[test]
fn backward_twice_is_an_error() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::ones(&[2]), true).unwrap();
    let y = tape.sum(x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.backward(y).unwrap_err(), TensorError::BackwardTwice);
}

#[test]
fn overflow_is_an_error_not_nan() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1], 1000.0)).unwrap();
    assert_eq!(tape.exp(x).unwrap_err(), TensorError::NonFinite { op: "exp" });
}

#[test]
fn shared_leaf_accumulates_from_both_paths() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]), true).unwrap();
    let y = tape.mul(x, x).unwrap();
    let z = tape.add(y, x).unwrap();
    let s = tape.sum(z).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 5.0]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-1e3f64..1e3, 2..40), cols in 1usize..6) {
        let rows = vals.len() / cols;
        prop_assume!(rows > 0);
        let x = Tensor::new(&[rows, cols], vals[..rows * cols].to_vec()).unwrap();
        let s = x.softmax(1).unwrap();
        for row in s.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn reshape_roundtrip_is_identical(vals in prop::collection::vec(-1e6f64..1e6, 12)) {
        let x = Tensor::new(&[3, 4], vals).unwrap();
        let back = x.reshape(&[2, 6]).unwrap().reshape(&[3, 4]).unwrap();
        prop_assert_eq!(
            x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn conv2d_equals_reference(seed in 0u64..1000, c in 1usize..=3, o in 1usize..=3,
                               h in 3usize..=8, w in 3usize..=8, stride in 1usize..=2, pad in 0usize..=1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kh = rng.random_range(1..=3usize);
        let kw = rng.random_range(1..=3usize);
        let x = random(&[c, h, w], &mut rng);
        let k = random(&[o, c, kh, kw], &mut rng);
        let b = random(&[o], &mut rng);
        let got = kernels::conv2d(&x, &k, Some(&b), stride, Pad2d::uniform(pad)).unwrap();
        prop_assert_eq!(got, conv_reference(&x, &k, Some(&b), stride, pad));
    }

    #[test]
    fn permute_inverse_roundtrip(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 3, 4, 2], &mut rng);
        let axes = [2, 0, 3, 1];
        let y = x.permute(&axes).unwrap();
        prop_assert_eq!(y.permute(&kernels::inverse_permutation(&axes)).unwrap(), x);
    }
}
