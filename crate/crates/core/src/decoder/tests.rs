use super::*;
use crate::tensor::grad_check;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    nn::normal(shape, 1.0, &mut rng(seed))
}

fn randomize(store: &mut ParamStore, seed: u64, std: f64) {
    let mut r = rng(seed);
    for p in store.iter_mut() {
        p.value = nn::normal(p.value.shape(), std, &mut r);
    }
}

fn set(store: &mut ParamStore, name: &str, t: Tensor) {
    let id = store.find(name).unwrap_or_else(|| panic!("no param {name}"));
    assert_eq!(store.value(id).shape(), t.shape());
    store.get_mut(id).value = t;
}

fn zero_all(store: &mut ParamStore) {
    for p in store.iter_mut() {
        p.value = Tensor::zeros(p.value.shape());
    }
}

fn attn_cfg(width: usize, heads: usize, depth: usize) -> DecoderConfig {
    DecoderConfig {
        width,
        heads,
        depth,
        ..DecoderConfig::default()
    }
}

const ATTENTION_3X4: [f64; 6] = [
    0.45557429484839275282,
    0.39497968487535947087,
    0.46971691419950349574,
    0.40776798342962556705,
    0.61665723147243482971,
    0.63828052223914111738,
];

#[test]
fn attention_matches_extended_precision() {
    let tape = Tape::new();
    let q = tape.constant(Tensor::new(&[3, 2], vec![0.2, -0.5, 1.0, 0.3, -0.7, 0.8]).unwrap()).unwrap();
    let k = tape
        .constant(Tensor::new(&[4, 2], vec![0.1, 0.4, -0.3, 0.9, 0.6, -0.2, 0.0, 0.5]).unwrap())
        .unwrap();
    let v = tape
        .constant(Tensor::new(&[4, 2], vec![1.0, -1.0, 0.5, 2.0, -0.3, 0.7, 0.9, 0.1]).unwrap())
        .unwrap();
    let a = nn::attention(&tape, q, k, v, 1).unwrap();
    for (got, want) in tape.value(a).data().iter().zip(ATTENTION_3X4) {
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }
}

#[test]
fn single_key_returns_its_value() {
    let tape = Tape::new();
    let q = tape.constant(randn(&[5, 4], 1)).unwrap();
    let k = tape.constant(randn(&[1, 4], 2)).unwrap();
    let v = tape.constant(Tensor::new(&[1, 4], vec![0.5, -1.0, 2.0, 3.0]).unwrap()).unwrap();
    let a = nn::attention(&tape, q, k, v, 2).unwrap();
    for row in tape.value(a).data().chunks(4) {
        assert_eq!(row, &[0.5, -1.0, 2.0, 3.0]);
    }
}

#[test]
fn identical_keys_average_values() {
    let tape = Tape::new();
    let q = tape.constant(randn(&[3, 2], 1)).unwrap();
    let k = tape.constant(Tensor::full(&[4, 2], 0.7)).unwrap();
    let vt = randn(&[4, 2], 3);
    let mean = vt.mean_rows();
    let v = tape.constant(vt).unwrap();
    let a = nn::attention(&tape, q, k, v, 1).unwrap();
    for row in tape.value(a).data().chunks(2) {
        for (x, m) in row.iter().zip(mean.data()) {
            assert!((x - m).abs() < 1e-15);
        }
    }
}

#[test]
fn zero_weights_leave_only_positional_query() {
    let (dec, mut store) = Decoder::init(&attn_cfg(8, 2, 1), 8, 2, 8, &mut rng(0)).unwrap();
    zero_all(&mut store);
    let tape = Tape::new();
    let p = store.bind(&tape, false).unwrap();
    let hc = tape.constant(randn(&[1, 1, 4, 8], 1)).unwrap();
    let hz = tape.constant(randn(&[1, 2, 3, 8], 2)).unwrap();
    let [u, q, k, v] = dec.project_qkv(&tape, &p, &dec.layers()[0], hc, hz).unwrap();
    assert_eq!(tape.value(u).max_abs(), 0.0);
    assert_eq!(tape.value(k).max_abs(), 0.0);
    assert_eq!(tape.value(v).max_abs(), 0.0);
    assert_eq!(tape.value(q).data(), Tensor::zeros(&[1, 1, 4, 8]).add(dec.pe().unwrap()).unwrap().data());
}

#[test]
fn identity_projection_adds_pe_exactly() {
    let (dec, mut store) = Decoder::init(&attn_cfg(8, 2, 1), 8, 2, 8, &mut rng(0)).unwrap();
    set(&mut store, "layers.0.f_c.weight", Tensor::eye(8));
    set(&mut store, "layers.0.f_c.bias", Tensor::zeros(&[8]));
    let tape = Tape::new();
    let p = store.bind(&tape, false).unwrap();
    let hct = randn(&[4, 8], 1);
    let hc = tape.constant(hct.clone()).unwrap();
    let hz = tape.constant(randn(&[3, 8], 2)).unwrap();
    let [_, q, _, _] = dec.project_qkv(&tape, &p, &dec.layers()[0], hc, hz).unwrap();
    assert_eq!(*tape.value(q), hct.add(dec.pe().unwrap()).unwrap());
}

#[test]
fn paper_shaped_token_counts() {
    let (dec, store) = Decoder::init(&attn_cfg(16, 4, 1), 8, 10, 160, &mut rng(0)).unwrap();
    let tape = Tape::new();
    let p = store.bind(&tape, false).unwrap();
    let hc = tape.constant(randn(&[1, 1, 100, 8], 1)).unwrap();
    let hz = tape.constant(randn(&[1, 6, 16, 8], 2)).unwrap();
    let [_, q, k, v] = dec.project_qkv(&tape, &p, &dec.layers()[0], hc, hz).unwrap();
    assert_eq!(tape.shape(q), vec![1, 1, 100, 16]);
    assert_eq!(tape.shape(k), vec![1, 6, 16, 16]);
    assert_eq!(tape.shape(v), vec![1, 6, 16, 16]);
    let hz = tape.constant(randn(&[6, 16, 8], 3)).unwrap();
    let hc = tape.constant(randn(&[1, 100, 8], 4)).unwrap();
    let out = dec.forward(&tape, &p, hz, hc, 6).unwrap();
    assert_eq!(tape.shape(out), vec![1, 6, 160, 160]);
}

#[test]
fn fuse_with_zero_mlp_exposes_residual() {
    let (dec, mut store) = Decoder::init(&attn_cfg(8, 2, 1), 8, 2, 8, &mut rng(0)).unwrap();
    randomize(&mut store, 1, 0.5);
    set(&mut store, "layers.0.mlp.fc2.weight", Tensor::zeros(&[32, 8]));
    set(&mut store, "layers.0.mlp.fc2.bias", Tensor::zeros(&[8]));
    let tape = Tape::new();
    let p = store.bind(&tape, false).unwrap();
    let xt = randn(&[4, 8], 2);
    let at = randn(&[4, 8], 3);
    let x = tape.constant(xt.clone()).unwrap();
    let a = tape.constant(at.clone()).unwrap();
    let h = dec.fuse(&tape, &p, &dec.layers()[0], x, a).unwrap();
    assert_eq!(*tape.value(h), xt.add(&at).unwrap());
    let zero = tape.constant(Tensor::zeros(&[4, 8])).unwrap();
    let h = dec.fuse(&tape, &p, &dec.layers()[0], x, zero).unwrap();
    assert_eq!(*tape.value(h), xt);
}

#[test]
fn fuse_gradients_match_finite_differences() {
    let (dec, mut store) = Decoder::init(&attn_cfg(8, 2, 1), 8, 2, 8, &mut rng(0)).unwrap();
    randomize(&mut store, 4, 0.5);
    let at = randn(&[4, 8], 5);
    let xt = randn(&[4, 8], 6);
    let w = randn(&[4, 8], 7);
    let layer = &dec.layers()[0];
    let objective = |tape: &Tape, h: Var| -> crate::tensor::Result<Var> {
        let wv = tape.constant(w.clone())?;
        let y = tape.mul(h, wv)?;
        tape.sum(y)
    };
    let via_a = grad_check(
        |tape, a| {
            let p = store.bind(tape, false)?;
            let x = tape.constant(xt.clone())?;
            objective(tape, dec.fuse(tape, &p, layer, x, a).unwrap())
        },
        &at,
        1e-5,
        1e-4,
    )
    .unwrap();
    let via_x = grad_check(
        |tape, x| {
            let p = store.bind(tape, false)?;
            let a = tape.constant(at.clone())?;
            objective(tape, dec.fuse(tape, &p, layer, x, a).unwrap())
        },
        &xt,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(via_a.passed, "{via_a:?}");
    assert!(via_x.passed, "{via_x:?}");
}

#[test]
fn predictor_bias_only_gives_constant_map() {
    let (dec, mut store) = Decoder::init(&attn_cfg(8, 2, 1), 8, 4, 16, &mut rng(0)).unwrap();
    set(&mut store, "predictor.weight", Tensor::zeros(&[8, 1]));
    set(&mut store, "predictor.bias", Tensor::new(&[1], vec![-0.75]).unwrap());
    let tape = Tape::new();
    let p = store.bind(&tape, false).unwrap();
    let h = tape.constant(Tensor::full(&[2, 16, 8], 0.3)).unwrap();
    let y = dec.predict_map(&tape, &p, h).unwrap();
    assert_eq!(tape.shape(y), vec![2, 16, 16]);
    assert!(tape.value(y).data().iter().all(|&v| v == -0.75));
}

#[test]
fn single_token_gives_constant_map() {
    let (dec, store) = Decoder::init(&attn_cfg(8, 2, 1), 8, 1, 8, &mut rng(0)).unwrap();
    let tape = Tape::new();
    let p = store.bind(&tape, false).unwrap();
    let h = tape.constant(randn(&[1, 8], 1)).unwrap();
    let y = tape.value(dec.predict_map(&tape, &p, h).unwrap());
    let first = y.data()[0];
    assert!(y.data().iter().all(|&v| v == first));
}

#[test]
fn two_by_two_grid_upsamples_bilinearly() {
    let (dec, mut store) = Decoder::init(&attn_cfg(4, 1, 1), 4, 2, 4, &mut rng(0)).unwrap();
    set(&mut store, "predictor.weight", Tensor::new(&[4, 1], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
    set(&mut store, "predictor.bias", Tensor::zeros(&[1]));
    let tape = Tape::new();
    let p = store.bind(&tape, false).unwrap();
    let logits = [0.0, 1.0, 2.0, 3.0];
    let mut h = vec![0.0; 16];
    for (t, l) in logits.iter().enumerate() {
        h[t * 4] = *l;
    }
    let hv = tape.constant(Tensor::new(&[4, 4], h).unwrap()).unwrap();
    let y = tape.value(dec.predict_map(&tape, &p, hv).unwrap());
    // half-pixel source positions for 2 -> 4 are [0, 0.25, 0.75, 1] after clamping
    let pos = [0.0, 0.25, 0.75, 1.0];
    for i in 0..4 {
        for j in 0..4 {
            assert!((y.data()[i * 4 + j] - (2.0 * pos[i] + pos[j])).abs() < 1e-15);
        }
    }
}

#[test]
fn wrong_token_count_is_dimension_error() {
    let (dec, store) = Decoder::init(&attn_cfg(8, 2, 1), 8, 4, 16, &mut rng(0)).unwrap();
    let tape = Tape::new();
    let p = store.bind(&tape, false).unwrap();
    let h = tape.constant(randn(&[15, 8], 1)).unwrap();
    assert!(matches!(
        dec.predict_map(&tape, &p, h),
        Err(DecoderError::Tensor(TensorError::Dimension { .. }))
    ));
}

fn conv_dec(enc_dim: usize, grid: usize, m: usize, bias: f64) -> (Decoder, ParamStore) {
    let cfg = DecoderConfig {
        correlation_op: CorrelationOp::Convolution,
        ..DecoderConfig::default()
    };
    let (dec, mut store) = Decoder::init(&cfg, enc_dim, grid, m, &mut rng(0)).unwrap();
    set(&mut store, "correlate.bias", Tensor::new(&[1], vec![bias]).unwrap());
    (dec, store)
}

/// Same-padded cross-correlation by direct summation over channel, kernel
/// row, kernel column, then the bias. For even kernels the extra padding
/// row/column goes after the input.
fn correlate_reference(hz: &[f64], hc: &[f64], gz: usize, gc: usize, d: usize, b: f64) -> Vec<f64> {
    let before = (gz - 1) as isize / 2;
    let mut out = vec![0.0; gc * gc];
    for i in 0..gc {
        for j in 0..gc {
            for c in 0..d {
                for ki in 0..gz {
                    for kj in 0..gz {
                        let ii = i as isize + ki as isize - before;
                        let jj = j as isize + kj as isize - before;
                        if ii < 0 || jj < 0 || ii >= gc as isize || jj >= gc as isize {
                            continue;
                        }
                        let (ii, jj) = (ii as usize, jj as usize);
                        out[i * gc + j] += hz[(ki * gz + kj) * d + c] * hc[(ii * gc + jj) * d + c];
                    }
                }
            }
            out[i * gc + j] += b;
        }
    }
    out
}

#[test]
fn one_by_one_kernel_is_a_dot_product() {
    let (dec, store) = conv_dec(3, 4, 4, 0.25);
    let tape = Tape::new();
    let p = store.bind(&tape, false).unwrap();
    let zt = randn(&[1, 1, 3], 1);
    let ct = randn(&[1, 16, 3], 2);
    let z = tape.constant(zt.clone()).unwrap();
    let c = tape.constant(ct.clone()).unwrap();
    let y = tape.value(dec.conv_correlate(&tape, &p, z, c, 1).unwrap());
    for t in 0..16 {
        let dot: f64 = (0..3).map(|k| zt.data()[k] * ct.data()[t * 3 + k]).sum();
        assert!((y.data()[t] - (dot + 0.25)).abs() < 1e-14);
    }
}

#[test]
fn zero_features_give_bias_map() {
    let (dec, store) = conv_dec(4, 4, 16, -1.5);
    let tape = Tape::new();
    let p = store.bind(&tape, false).unwrap();
    let z = tape.constant(Tensor::zeros(&[2, 4, 4])).unwrap();
    let c = tape.constant(Tensor::zeros(&[1, 16, 4])).unwrap();
    let y = dec.forward(&tape, &p, z, c, 2).unwrap();
    assert_eq!(tape.shape(y), vec![1, 2, 16, 16]);
    assert!(tape.value(y).data().iter().all(|&v| v == -1.5));
}

#[test]
fn conv_correlate_matches_naive_loops() {
    for (gz, seed) in [(2, 1), (3, 2), (4, 3)] {
        let (gc, d, k, b) = (6, 3, 2, 2);
        let (dec, store) = conv_dec(d, gc, gc, 0.1);
        let tape = Tape::new();
        let p = store.bind(&tape, false).unwrap();
        let zt = randn(&[b * k, gz * gz, d], seed);
        let ct = randn(&[b, gc * gc, d], seed + 10);
        let z = tape.constant(zt.clone()).unwrap();
        let c = tape.constant(ct.clone()).unwrap();
        let y = tape.value(dec.conv_correlate(&tape, &p, z, c, k).unwrap());
        for bi in 0..b {
            for ki in 0..k {
                let pair = bi * k + ki;
                let hz = &zt.data()[pair * gz * gz * d..(pair + 1) * gz * gz * d];
                let hc = &ct.data()[bi * gc * gc * d..(bi + 1) * gc * gc * d];
                let want = correlate_reference(hz, hc, gz, gc, d, 0.1);
                assert_eq!(&y.data()[pair * gc * gc..(pair + 1) * gc * gc], want.as_slice(), "gz={gz}");
            }
        }
    }
}

#[test]
fn oversized_kernel_is_dimension_error() {
    let (dec, store) = conv_dec(2, 3, 12, 0.0);
    let tape = Tape::new();
    let p = store.bind(&tape, false).unwrap();
    let z = tape.constant(randn(&[1, 16, 2], 1)).unwrap();
    let c = tape.constant(randn(&[1, 9, 2], 2)).unwrap();
    assert!(matches!(
        dec.conv_correlate(&tape, &p, z, c, 1),
        Err(DecoderError::Tensor(TensorError::Dimension { .. }))
    ));
}

#[test]
fn sincos_table_layout() {
    let pe = sincos_2d(3, 8);
    assert_eq!(pe.shape(), &[9, 8]);
    // token (row 1, col 2): row half then column half, each [sin, sin, cos, cos]
    let row = &pe.data()[5 * 8..6 * 8];
    // w = [1, 0.01] for d = 8
    let r1 = [1.0f64.sin(), (1.0 * 0.01f64).sin(), 1.0f64.cos(), (1.0 * 0.01f64).cos()];
    let c2 = [2.0f64.sin(), (2.0 * 0.01f64).sin(), 2.0f64.cos(), (2.0 * 0.01f64).cos()];
    for (a, b) in row.iter().zip(r1.iter().chain(&c2)) {
        assert!((a - b).abs() < 1e-15, "{row:?}");
    }
}

fn attn_inputs(seed: u64, tq: usize, tk: usize, d: usize) -> (Tensor, Tensor, Tensor) {
    (randn(&[tq, d], seed), randn(&[tk, d], seed + 1), randn(&[tk, d], seed + 2))
}

fn run_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Vec<f64> {
    let tape = Tape::new();
    let (q, k, v) = (
        tape.constant(q.clone()).unwrap(),
        tape.constant(k.clone()).unwrap(),
        tape.constant(v.clone()).unwrap(),
    );
    tape.value(nn::attention(&tape, q, k, v, heads).unwrap()).data().to_vec()
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let d = t.shape()[1];
    let data = perm.iter().flat_map(|&i| t.data()[i * d..(i + 1) * d].to_vec()).collect();
    Tensor::new(t.shape(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn prop_key_value_permutation_invariance(seed in any::<u64>(), rot in 1usize..6) {
        let (q, k, v) = attn_inputs(seed, 5, 6, 8);
        let perm: Vec<usize> = (0..6).map(|i| (i * 5 + rot) % 6).collect();
        let a = run_attention(&q, &k, &v, 2);
        let b = run_attention(&q, &permute_rows(&k, &perm), &permute_rows(&v, &perm), 2);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn prop_query_equivariance(seed in any::<u64>(), rot in 1usize..5) {
        let (q, k, v) = attn_inputs(seed, 5, 4, 4);
        let perm: Vec<usize> = (0..5).map(|i| (i + rot) % 5).collect();
        let a = run_attention(&q, &k, &v, 1);
        let b = run_attention(&permute_rows(&q, &perm), &k, &v, 1);
        for (r, &i) in perm.iter().enumerate() {
            for c in 0..4 {
                prop_assert!((b[r * 4 + c] - a[i * 4 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prop_attention_is_convex(seed in any::<u64>()) {
        let (q, k, v) = attn_inputs(seed, 4, 5, 6);
        let a = run_attention(&q.scale(3.0), &k, &v, 1);
        for c in 0..6 {
            let col: Vec<f64> = (0..5).map(|j| v.data()[j * 6 + c]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..4 {
                prop_assert!(a[i * 6 + c] >= lo - 1e-12 && a[i * 6 + c] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn prop_sigmoid_of_logits_is_a_probability(seed in any::<u64>()) {
        let (dec, mut store) = Decoder::init(&attn_cfg(8, 2, 1), 4, 2, 8, &mut rng(seed)).unwrap();
        randomize(&mut store, seed, 0.2);
        let tape = Tape::new();
        let p = store.bind(&tape, false).unwrap();
        let z = tape.constant(randn(&[2, 4, 4], seed ^ 3)).unwrap();
        let c = tape.constant(randn(&[1, 4, 4], seed ^ 4)).unwrap();
        let y = dec.forward(&tape, &p, z, c, 2).unwrap();
        let s = tape.sigmoid(y).unwrap();
        prop_assert!(tape.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn ablation_grid_preserves_shapes() {
    let (b, k, m, grid, enc_dim, tz) = (2, 2, 64, 8, 16, 16);
    for op in [CorrelationOp::CrossAttention, CorrelationOp::Convolution] {
        for predictor in [Predictor::Linear, Predictor::DeepDeconv] {
            for depth in [1, 2, 4] {
                for width in [32, 64, 128] {
                    let cfg = DecoderConfig {
                        width,
                        heads: 4,
                        depth,
                        mlp_ratio: 1,
                        predictor,
                        correlation_op: op,
                    };
                    let (dec, store) = Decoder::init(&cfg, enc_dim, grid, m, &mut rng(1)).unwrap();
                    let tape = Tape::new();
                    let p = store.bind(&tape, false).unwrap();
                    let z = tape.constant(randn(&[b * k, tz, enc_dim], 1)).unwrap();
                    let c = tape.constant(randn(&[b, grid * grid, enc_dim], 2)).unwrap();
                    let y = dec.forward(&tape, &p, z, c, k).unwrap();
                    assert_eq!(tape.shape(y), vec![b, k, m, m], "{cfg:?}");
                }
            }
        }
    }
}
