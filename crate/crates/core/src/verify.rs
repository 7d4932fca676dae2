//! Finite-difference gradient suite over every tape op and the full
//! context-to-loss pipeline. Shared by `cim gradcheck` and the tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::DecoderConfig;
use crate::encoder::{Backbone, BootstrapMode, EncoderConfig, ViTConfig};
use crate::geometry::{BatchConfig, Image};
use crate::nn;
use crate::tensor::gradcheck::relative_error;
use crate::tensor::kernels::Pad2d;
use crate::tensor::{grad_check, ParamStore, Result, Tape, Tensor, Var};
use crate::trainer::{ModelConfig, TrainConfig, TrainState};

pub const OP_EPS: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-4;
pub const E2E_EPS: f64 = 1e-4;
pub const E2E_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub seeds: u64,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

type OpFn = Box<dyn Fn(&Tape, Var) -> Result<Var>>;

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduce `y` to a scalar through a fixed random weighting so every output
/// component carries a distinct cotangent.
fn weighted_sum(tp: &Tape, y: Var, w: &Tensor) -> Result<Var> {
    let wv = tp.constant(w.clone())?;
    let p = tp.mul(y, wv)?;
    tp.sum(p)
}

struct OpCase {
    name: &'static str,
    input: Vec<usize>,
    /// Builds the op given constant operands drawn from the rng, and the
    /// output shape it will produce.
    build: fn(&mut ChaCha8Rng) -> (Box<dyn Fn(&Tape, Var) -> Result<Var>>, Vec<usize>),
}

macro_rules! case {
    ($name:literal, $input:expr, |$rng:ident| $body:expr) => {
        OpCase {
            name: $name,
            input: $input.to_vec(),
            build: |$rng| {
                let (f, out): (OpFn, Vec<usize>) = $body;
                (f, out)
            },
        }
    };
}

fn cases() -> Vec<OpCase> {
    vec![
        case!("add", [3, 4], |r| {
            let c = uniform(&[4], r);
            (Box::new(move |tp, x| tp.add(x, tp.constant(c.clone())?)), vec![3, 4])
        }),
        case!("add.broadcast_operand", [4], |r| {
            let c = uniform(&[3, 4], r);
            (Box::new(move |tp, x| tp.add(tp.constant(c.clone())?, x)), vec![3, 4])
        }),
        case!("sub", [3, 4], |r| {
            let c = uniform(&[3, 1], r);
            (Box::new(move |tp, x| tp.sub(tp.constant(c.clone())?, x)), vec![3, 4])
        }),
        case!("mul", [2, 3, 4], |r| {
            let c = uniform(&[3, 1], r);
            (Box::new(move |tp, x| tp.mul(x, tp.constant(c.clone())?)), vec![2, 3, 4])
        }),
        case!("scale", [5], |_r| (Box::new(|tp, x| tp.scale(x, -1.7)), vec![5])),
        case!("neg", [5], |_r| (Box::new(|tp, x| tp.neg(x)), vec![5])),
        case!("add_scalar", [5], |_r| (Box::new(|tp, x| tp.add_scalar(x, 0.3)), vec![5])),
        case!("matmul.lhs", [2, 3, 4], |r| {
            let b = uniform(&[4, 5], r);
            (Box::new(move |tp, x| tp.matmul(x, tp.constant(b.clone())?)), vec![2, 3, 5])
        }),
        case!("matmul.rhs", [4, 5], |r| {
            let a = uniform(&[2, 3, 4], r);
            (Box::new(move |tp, x| tp.matmul(tp.constant(a.clone())?, x)), vec![2, 3, 5])
        }),
        case!("linear.weight", [4, 3], |r| {
            let a = uniform(&[5, 4], r);
            let b = uniform(&[3], r);
            (
                Box::new(move |tp, w| tp.linear(tp.constant(a.clone())?, w, Some(tp.constant(b.clone())?))),
                vec![5, 3],
            )
        }),
        case!("gelu", [12], |_r| (Box::new(|tp, x| tp.gelu(x)), vec![12])),
        case!("sigmoid", [12], |_r| (Box::new(|tp, x| tp.sigmoid(x)), vec![12])),
        case!("softplus", [12], |_r| (Box::new(|tp, x| tp.softplus(x)), vec![12])),
        case!("exp", [12], |_r| (Box::new(|tp, x| tp.exp(x)), vec![12])),
        case!("mean", [3, 4], |_r| {
            (
                Box::new(|tp, x| {
                    let m = tp.mean(x)?;
                    tp.mul(m, m)
                }),
                vec![],
            )
        }),
        case!("reshape", [3, 4], |_r| (Box::new(|tp, x| tp.reshape(x, &[2, 6])), vec![2, 6])),
        case!("permute", [2, 3, 4], |_r| (Box::new(|tp, x| tp.permute(x, &[2, 0, 1])), vec![4, 2, 3])),
        case!("transpose", [2, 3, 4], |_r| (Box::new(|tp, x| tp.transpose(x)), vec![2, 4, 3])),
        case!("softmax", [3, 5], |_r| (Box::new(|tp, x| tp.softmax(x, 1)), vec![3, 5])),
        case!("log_softmax", [3, 5], |_r| (Box::new(|tp, x| tp.log_softmax(x, 1)), vec![3, 5])),
        case!("layernorm.input", [3, 6], |r| {
            let g = uniform(&[6], r);
            let b = uniform(&[6], r);
            (
                Box::new(move |tp, x| tp.layernorm(x, tp.constant(g.clone())?, tp.constant(b.clone())?, nn::LN_EPS)),
                vec![3, 6],
            )
        }),
        case!("layernorm.gamma", [6], |r| {
            let x = uniform(&[3, 6], r);
            let b = uniform(&[6], r);
            (
                Box::new(move |tp, g| tp.layernorm(tp.constant(x.clone())?, g, tp.constant(b.clone())?, nn::LN_EPS)),
                vec![3, 6],
            )
        }),
        case!("conv2d.input", [2, 2, 5, 5], |r| {
            let k = uniform(&[3, 2, 3, 3], r);
            let b = uniform(&[3], r);
            (
                Box::new(move |tp, x| {
                    tp.conv2d(x, tp.constant(k.clone())?, Some(tp.constant(b.clone())?), 2, 1)
                }),
                vec![2, 3, 3, 3],
            )
        }),
        case!("conv2d.kernel", [3, 2, 3, 3], |r| {
            let x = uniform(&[2, 5, 5], r);
            (
                Box::new(move |tp, k| tp.conv2d(tp.constant(x.clone())?, k, None, 1, 1)),
                vec![3, 5, 5],
            )
        }),
        case!("conv2d.same_even_kernel", [2, 2, 2], |r| {
            let x = uniform(&[2, 4, 4], r);
            (
                Box::new(move |tp, k| {
                    let k = tp.reshape(k, &[1, 2, 2, 2])?;
                    tp.conv2d_padded(tp.constant(x.clone())?, k, None, 1, Pad2d::same(2, 2))
                }),
                vec![1, 4, 4],
            )
        }),
        case!("conv_transpose2d.input", [2, 3, 3], |r| {
            let k = uniform(&[2, 3, 2, 2], r);
            let b = uniform(&[3], r);
            (
                Box::new(move |tp, x| {
                    tp.conv_transpose2d(x, tp.constant(k.clone())?, Some(tp.constant(b.clone())?), 2)
                }),
                vec![3, 6, 6],
            )
        }),
        case!("conv_transpose2d.kernel", [2, 3, 2, 2], |r| {
            let x = uniform(&[2, 3, 3], r);
            (
                Box::new(move |tp, k| tp.conv_transpose2d(tp.constant(x.clone())?, k, None, 2)),
                vec![3, 6, 6],
            )
        }),
        case!("upsample_bilinear", [2, 3, 3], |_r| {
            (Box::new(|tp, x| tp.upsample_bilinear(x, 7, 5)), vec![2, 7, 5])
        }),
        case!("narrow", [3, 5], |_r| (Box::new(|tp, x| tp.narrow(x, 1, 1, 3)), vec![3, 3])),
        case!("concat", [2, 3], |r| {
            let c = uniform(&[2, 2], r);
            (Box::new(move |tp, x| tp.concat(&[x, tp.constant(c.clone())?, x], 1)), vec![2, 8])
        }),
        case!("attention", [2, 3, 4], |r| {
            let k = uniform(&[2, 5, 4], r);
            let v = uniform(&[2, 5, 4], r);
            (
                Box::new(move |tp, q| nn::attention(tp, q, tp.constant(k.clone())?, tp.constant(v.clone())?, 2)),
                vec![2, 3, 4],
            )
        }),
    ]
}

/// Every op over `seeds` random draws; reports the worst relative error.
pub fn op_suite(seeds: u64) -> Vec<CheckResult> {
    cases()
        .into_iter()
        .map(|case| {
            let mut worst = 0.0f64;
            let mut ok = true;
            for seed in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = uniform(&case.input, &mut rng);
                let (f, out_shape) = (case.build)(&mut rng);
                let w = uniform(&out_shape, &mut rng);
                let report = grad_check(|tp, x| weighted_sum(tp, f(tp, x)?, &w), &x, OP_EPS, OP_TOL);
                match report {
                    Ok(r) => {
                        worst = worst.max(r.max_rel_err);
                        ok &= r.passed;
                    }
                    Err(_) => {
                        ok = false;
                        worst = f64::INFINITY;
                    }
                }
            }
            CheckResult {
                name: case.name.to_string(),
                seeds,
                max_rel_err: worst,
                tol: OP_TOL,
                passed: ok,
            }
        })
        .collect()
}

/// Desk-shaped model with one context and two exemplars.
pub fn e2e_model(mode: BootstrapMode) -> ModelConfig {
    ModelConfig {
        data: BatchConfig::default(),
        encoder: EncoderConfig {
            backbone: Backbone::Vit(ViTConfig {
                depth: 2,
                ..ViTConfig::default()
            }),
            ..EncoderConfig::default()
        },
        decoder: DecoderConfig::default(),
        mode,
    }
}

fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += 0.05 * rng.random_range(-1.0..1.0);
        }
    }
}

fn image(seed: u64) -> Image {
    let f = 0.05 + 0.01 * (seed % 7) as f64;
    Image::from_fn(128, 128, move |c, y, x| {
        0.5 + 0.3 * ((x as f64 * f + c as f64).sin() * (y as f64 * 0.07 + seed as f64).cos())
    })
}

/// Analytic versus central-difference gradients of the training loss at
/// `samples` random parameter entries of the trained encoder store and of
/// the decoder. Seeds alternate between separate-target and shared modes.
pub fn end_to_end(seeds: u64, samples: usize) -> CheckResult {
    let mut worst = 0.0f64;
    let mut ok = true;
    for seed in 0..seeds {
        match e2e_seed(seed, samples) {
            Ok(e) => {
                worst = worst.max(e);
                ok &= e < E2E_TOL;
            }
            Err(_) => {
                ok = false;
                worst = f64::INFINITY;
            }
        }
    }
    CheckResult {
        name: "end_to_end".into(),
        seeds,
        max_rel_err: worst,
        tol: E2E_TOL,
        passed: ok,
    }
}

fn e2e_seed(seed: u64, samples: usize) -> crate::trainer::Result<f64> {
    let mode = if seed.is_multiple_of(2) {
        BootstrapMode::OnlineToTarget
    } else {
        BootstrapMode::Shared
    };
    let train = TrainConfig {
        batch_size: 1,
        seed,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(e2e_model(mode), train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    jitter(state.pair.trained_mut(), &mut rng);
    jitter(&mut state.decoder_params, &mut rng);
    if state.pair.has_separate_target() {
        jitter(state.pair.xi_mut(), &mut rng);
    }
    let batches = state.sample_batches(&[image(seed)])?;
    state.compute_grads(&batches)?;
    let mut worst = 0.0f64;
    for s in 0..samples {
        let on_decoder = s % 2 == 1;
        let store = if on_decoder {
            &state.decoder_params
        } else {
            state.pair.trained()
        };
        let pi = rng.random_range(0..store.len());
        let param = store.iter().nth(pi).unwrap();
        let ei = rng.random_range(0..param.value.len());
        let analytic = param.grad.as_ref().map_or(0.0, |g| g.data()[ei]);
        let mut eval_at = |delta: f64| -> crate::trainer::Result<f64> {
            let store = if on_decoder {
                &mut state.decoder_params
            } else {
                state.pair.trained_mut()
            };
            let v = &mut store.iter_mut().nth(pi).unwrap().value.data_mut()[ei];
            let orig = *v;
            *v = orig + delta;
            let loss = state.eval_loss(&batches);
            let store = if on_decoder {
                &mut state.decoder_params
            } else {
                state.pair.trained_mut()
            };
            store.iter_mut().nth(pi).unwrap().value.data_mut()[ei] = orig;
            loss
        };
        let numeric = (eval_at(E2E_EPS)? - eval_at(-E2E_EPS)?) / (2.0 * E2E_EPS);
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(worst)
}

/// Per-op results followed by the end-to-end result.
pub fn full_suite(seeds: u64) -> Vec<CheckResult> {
    let mut r = op_suite(seeds);
    r.push(end_to_end(seeds, 16));
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_pass_on_a_few_seeds() {
        for r in op_suite(3) {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn end_to_end_passes_on_two_seeds() {
        let r = end_to_end(2, 8);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // forward is x^2 but the declared derivative is 3x
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = grad_check(
            |tp, x| {
                let y = tp.map(x, |v| v * v, |v| 3.0 * v)?;
                tp.sum(y)
            },
            &x,
            OP_EPS,
            OP_TOL,
        )
        .unwrap();
        assert!(!r.passed);
    }
}
