//! Parameterized building blocks shared by the encoder and decoder.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Bound, ParamId, ParamStore, Result, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

/// Normal samples with `std`, redrawn outside two standard deviations.
pub fn trunc_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std is positive");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape is positive")
}

/// Plain normal samples, used for He-style conv init.
pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std is positive");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape is positive")
}

/// How a weight matrix starts out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    TruncNormal(f64),
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = match init {
            Init::TruncNormal(std) => trunc_normal(&[fan_in, fan_out], std, rng),
            Init::Zeros => Tensor::zeros(&[fan_in, fan_out]),
        };
        let w = store.add(format!("{name}.weight"), w, true);
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), false));
        Self { w, b }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p[self.w], self.b.map(|b| p[b]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Tensor::ones(&[dim]), false),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), false),
        }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layernorm(x, p[self.gamma], p[self.beta], LN_EPS)
    }
}

/// Two-layer GELU MLP. The second layer starts at zero so a residual
/// branch built on it is initially the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, Init::TruncNormal(INIT_STD), rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, Init::Zeros, rng),
        }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, p, h)
    }
}

/// `[.., T, D] -> [.., H, T, D/H]`.
fn split_heads(tape: &Tape, x: Var, heads: usize) -> Result<Var> {
    let mut shape = tape.shape(x);
    let r = shape.len();
    let d = shape[r - 1];
    shape[r - 1] = heads;
    shape.push(d / heads);
    let x = tape.reshape(x, &shape)?;
    let mut axes: Vec<usize> = (0..r + 1).collect();
    axes.swap(r - 2, r - 1);
    tape.permute(x, &axes)
}

/// `[.., H, T, Dh] -> [.., T, H * Dh]`.
fn merge_heads(tape: &Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x);
    let r = shape.len();
    let mut axes: Vec<usize> = (0..r).collect();
    axes.swap(r - 3, r - 2);
    let x = tape.permute(x, &axes)?;
    let mut out: Vec<usize> = shape[..r - 3].to_vec();
    out.push(shape[r - 2]);
    out.push(shape[r - 3] * shape[r - 1]);
    tape.reshape(x, &out)
}

/// Scaled dot-product attention split over `heads`, without projections.
/// `q: [.., Tq, D]`, `k, v: [.., Tk, D]`; leading axes broadcast.
/// Scores are scaled by `1/sqrt(D/heads)` and normalized over keys.
pub fn attention(tape: &Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let d = *tape.shape(q).last().expect("rank >= 1");
    let dh = d / heads;
    let qh = split_heads(tape, q, heads)?;
    let kh = split_heads(tape, k, heads)?;
    let vh = split_heads(tape, v, heads)?;
    let kt = tape.transpose(kh)?;
    let scores = tape.matmul(qh, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let axis = tape.shape(scores).len() - 1;
    let probs = tape.softmax(scores, axis)?;
    let out = tape.matmul(probs, vh)?;
    merge_heads(tape, out)
}
