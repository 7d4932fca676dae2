//! Per-pixel losses on correlation logits, and map agreement metrics.
//!
//! Losses take logits and a same-shaped 0/1 target and reduce by the mean
//! over every element, so a `[B, K, m, m]` batch is averaged over
//! contexts, exemplars and pixels alike.

use thiserror::Error;

use crate::geometry::CorrelationMap;
use crate::tensor::{kernels, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("non-finite value in {0}")]
    Numeric(&'static str),
    #[error("shape mismatch: logits {logits:?} vs target {target:?}")]
    Shape { logits: Vec<usize>, target: Vec<usize> },
    #[error("loss config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Plain binary cross-entropy.
    Bce,
    /// Cross-entropy with positives and negatives reweighted to equal mass.
    BalancedCe,
    Mse,
    Focal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Bce,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma >= 0.0) {
            return Err(ObjectiveError::Config(format!("focal gamma {} is negative", self.focal_gamma)));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(ObjectiveError::Config(format!("focal alpha {} is outside (0, 1)", self.focal_alpha)));
        }
        Ok(())
    }
}

fn check(tape: &Tape, logits: Var, y: &Tensor) -> Result<()> {
    let shape = tape.shape(logits);
    if shape != y.shape() {
        return Err(ObjectiveError::Shape {
            logits: shape,
            target: y.shape().to_vec(),
        });
    }
    if !tape.value(logits).all_finite() {
        return Err(ObjectiveError::Numeric("logits"));
    }
    if !y.all_finite() {
        return Err(ObjectiveError::Numeric("target"));
    }
    Ok(())
}

/// Elementwise `softplus(l) - y l`, i.e. `-[y log s(l) + (1-y) log(1-s(l))]`.
fn bce_elements(tape: &Tape, logits: Var, y: &Tensor) -> Result<Var> {
    let sp = tape.softplus(logits)?;
    let yv = tape.constant(y.clone())?;
    let yl = tape.mul(yv, logits)?;
    Ok(tape.sub(sp, yl)?)
}

pub fn bce_loss(tape: &Tape, logits: Var, y: &Tensor) -> Result<Var> {
    check(tape, logits, y)?;
    let l = bce_elements(tape, logits, y)?;
    Ok(tape.mean(l)?)
}

/// Per-element weights `N/(2P)` on positives and `N/(2(N-P))` on negatives,
/// computed independently for each map over the last two axes. Maps with
/// only one class get weight 1 everywhere.
pub fn balance_weights(y: &Tensor) -> Tensor {
    let shape = y.shape();
    let plane = match shape.len() {
        0 => 1,
        1 => shape[0],
        r => shape[r - 2] * shape[r - 1],
    };
    let mut w = Vec::with_capacity(y.len());
    for map in y.data().chunks(plane) {
        let n = map.len() as f64;
        let pos = map.iter().filter(|&&v| v > 0.5).count() as f64;
        if pos == 0.0 || pos == n {
            w.extend(std::iter::repeat_n(1.0, map.len()));
            continue;
        }
        let (wp, wn) = (n / (2.0 * pos), n / (2.0 * (n - pos)));
        w.extend(map.iter().map(|&v| if v > 0.5 { wp } else { wn }));
    }
    Tensor::new(shape, w).expect("same shape as target")
}

pub fn balanced_ce_loss(tape: &Tape, logits: Var, y: &Tensor) -> Result<Var> {
    check(tape, logits, y)?;
    let l = bce_elements(tape, logits, y)?;
    let w = tape.constant(balance_weights(y))?;
    let wl = tape.mul(w, l)?;
    Ok(tape.mean(wl)?)
}

pub fn mse_loss(tape: &Tape, logits: Var, y: &Tensor) -> Result<Var> {
    check(tape, logits, y)?;
    let p = tape.sigmoid(logits)?;
    let yv = tape.constant(y.clone())?;
    let d = tape.sub(p, yv)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq)?)
}

/// `alpha (1 - p_t)^gamma (-log p_t)` with `p_t` the probability of the
/// true class, evaluated as `alpha exp(-gamma softplus(z)) softplus(-z)`
/// where `z = (2y - 1) l`.
pub fn focal_loss(tape: &Tape, logits: Var, y: &Tensor, gamma: f64, alpha: f64) -> Result<Var> {
    check(tape, logits, y)?;
    let sign = tape.constant(y.map(|v| 2.0 * v - 1.0))?;
    let z = tape.mul(sign, logits)?;
    let neg_log_pt = tape.softplus(tape.neg(z)?)?;
    let log_mod = tape.scale(tape.softplus(z)?, -gamma)?;
    let modulator = tape.exp(log_mod)?;
    let l = tape.mul(modulator, neg_log_pt)?;
    let l = tape.scale(l, alpha)?;
    Ok(tape.mean(l)?)
}

pub fn loss(tape: &Tape, cfg: &LossConfig, logits: Var, y: &Tensor) -> Result<Var> {
    match cfg.kind {
        LossKind::Bce => bce_loss(tape, logits, y),
        LossKind::BalancedCe => balanced_ce_loss(tape, logits, y),
        LossKind::Mse => mse_loss(tape, logits, y),
        LossKind::Focal => focal_loss(tape, logits, y, cfg.focal_gamma, cfg.focal_alpha),
    }
}

/// Sigmoid of each `m x m` logit plane as a map.
pub fn probability_maps(logits: &Tensor) -> Vec<CorrelationMap> {
    let shape = logits.shape();
    let m = shape[shape.len() - 1];
    logits
        .data()
        .chunks(m * m)
        .map(|c| CorrelationMap::new(m, c.iter().map(|&v| kernels::sigmoid(v)).collect()))
        .collect()
}

/// Stack maps into a `[len, m, m]` target tensor.
pub fn stack_maps(maps: &[&CorrelationMap]) -> Tensor {
    let m = maps[0].size();
    let data = maps.iter().flat_map(|c| c.values().iter().copied()).collect();
    Tensor::new(&[maps.len(), m, m], data).expect("maps are non-empty")
}

/// `|pred > t  and  y| / |pred > t  or  y|`, with `y` thresholded at 0.5;
/// 1 when both sets are empty.
pub fn iou_metric(pred: &CorrelationMap, y: &CorrelationMap, threshold: f64) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.values().iter().zip(y.values()) {
        let (a, b) = (p > threshold, t > 0.5);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
