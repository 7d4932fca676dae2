//! Linear probe on frozen encoder features.
//!
//! Images are resized to the exemplar resolution and encoded with the
//! exemplar position table. Token features are mean-pooled, standardized
//! with training-split statistics, and a softmax linear head is fit with
//! AdamW on the full training split.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{Encoder, EncoderError, Resolution};
use crate::geometry::Image;
use crate::nn;
use crate::tensor::{ParamStore, Tape, Tensor, TensorError};
use crate::trainer::{adamw_step, lr_at, AdamWConfig, Moments};

/// Images encoded per forward pass.
const CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSettings {
    pub steps: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

/// Mean-pooled features `[N, D]`.
pub fn pooled_features(encoder: &Encoder, params: &ParamStore, images: &[Image]) -> Result<Tensor, EncoderError> {
    let n = encoder.config().exemplar_size;
    let d = encoder.out_dim();
    let mut out = Vec::with_capacity(images.len() * d);
    for chunk in images.chunks(CHUNK) {
        let tape = Tape::new();
        let bound = params.bind(&tape, false)?;
        let resized: Vec<Image> = chunk
            .iter()
            .map(|x| if x.height() == n && x.width() == n { x.clone() } else { x.resize(n, n) })
            .collect();
        let h = encoder.forward(&tape, &bound, &resized, Resolution::Exemplar)?;
        let t = tape.value(h);
        let tokens = t.shape()[1];
        for b in 0..chunk.len() {
            let block = &t.data()[b * tokens * d..(b + 1) * tokens * d];
            for j in 0..d {
                out.push((0..tokens).map(|i| block[i * d + j]).sum::<f64>() / tokens as f64);
            }
        }
    }
    Ok(Tensor::new(&[images.len(), d], out)?)
}

/// Column mean and standard deviation (floored at 1e-8).
pub fn column_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.data()[i * d + j]).sum::<f64>() / n as f64).collect();
    let std = (0..d)
        .map(|j| {
            let v = (0..n).map(|i| (x.data()[i * d + j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            v.sqrt().max(1e-8)
        })
        .collect();
    (mean, std)
}

pub fn standardize(x: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let d = mean.len();
    let data = x.data().iter().enumerate().map(|(i, v)| (v - mean[i % d]) / std[i % d]).collect();
    Tensor::new(x.shape(), data).unwrap()
}

/// Linear softmax classifier.
#[derive(Clone, Debug)]
pub struct LinearHead {
    pub params: ParamStore,
    pub classes: usize,
}

impl LinearHead {
    pub fn fit(x: &Tensor, labels: &[usize], classes: usize, s: &ProbeSettings) -> Result<Self, TensorError> {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        let mut params = ParamStore::new();
        params.add("weight", nn::trunc_normal(&[d, classes], nn::INIT_STD, &mut rng), true);
        params.add("bias", Tensor::zeros(&[classes]), false);
        let mut onehot = vec![0.0; n * classes];
        for (i, &l) in labels.iter().enumerate() {
            onehot[i * classes + l] = 1.0;
        }
        let onehot = Tensor::new(&[n, classes], onehot)?;
        let cfg = AdamWConfig {
            weight_decay: s.weight_decay,
            ..AdamWConfig::default()
        };
        let mut moments = Moments::zeros_like(&params);
        for step in 0..s.steps {
            let tape = Tape::new();
            let p = params.bind(&tape, true)?;
            let xv = tape.constant(x.clone())?;
            let logits = tape.linear(xv, p.vars()[0], Some(p.vars()[1]))?;
            let logp = tape.log_softmax(logits, 1)?;
            let y = tape.constant(onehot.clone())?;
            let picked = tape.mul(logp, y)?;
            let total = tape.sum(picked)?;
            let loss = tape.scale(total, -1.0 / n as f64)?;
            tape.backward(loss)?;
            params.zero_grads();
            params.accumulate_grads(&tape, &p);
            let lr = lr_at(step, s.steps, 0, s.lr);
            adamw_step(&mut params, &mut moments, lr, step + 1, &cfg);
        }
        Ok(Self { params, classes })
    }

    pub fn predict(&self, x: &Tensor) -> Vec<usize> {
        let w = &self.params.iter().next().unwrap().value;
        let b = &self.params.iter().nth(1).unwrap().value;
        let logits = x.matmul(w).unwrap();
        logits
            .data()
            .chunks(self.classes)
            .map(|row| {
                let s: Vec<f64> = row.iter().zip(b.data()).map(|(a, c)| a + c).collect();
                (0..self.classes).fold(0, |best, j| if s[j] > s[best] { j } else { best })
            })
            .collect()
    }
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

/// Fit on the training split and return top-1 accuracy on the test split.
pub fn probe_accuracy(
    encoder: &Encoder,
    params: &ParamStore,
    train: (&[Image], &[usize]),
    test: (&[Image], &[usize]),
    classes: usize,
    s: &ProbeSettings,
) -> Result<f64, EncoderError> {
    let ftr = pooled_features(encoder, params, train.0)?;
    let fte = pooled_features(encoder, params, test.0)?;
    let (mean, std) = column_stats(&ftr);
    let head = LinearHead::fit(&standardize(&ftr, &mean, &std), train.1, classes, s)?;
    Ok(accuracy(&head.predict(&standardize(&fte, &mean, &std)), test.1))
}
