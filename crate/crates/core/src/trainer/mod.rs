//! Training loop: batch sampling, forward through both encoders and the
//! decoder, loss, backward, clipping, AdamW, EMA, checkpoints and metrics.

pub mod checkpoint;
pub mod optim;

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::decoder::{Decoder, DecoderConfig, DecoderError};
use crate::encoder::{BootstrapMode, Encoded, Encoder, EncoderConfig, EncoderError, EncoderPair, DEFAULT_TAU};
use crate::geometry::{build_batch, BatchConfig, ExemplarContextBatch, GeometryError, Image};
use crate::objective::{self, LossConfig, ObjectiveError};
use crate::tensor::{Bound, ParamStore, Tape, Tensor, TensorError, Var};

pub use checkpoint::{Checkpoint, CheckpointError, RngState};
pub use optim::{adamw_step, clip_global_norm, lr_at, AdamWConfig, Moments};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config error: {0}")]
    Config(String),
    #[error("numeric error at step {step}: {detail}")]
    Numeric { step: u64, detail: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl TrainError {
    fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::Numeric { .. }
                | TrainError::Tensor(TensorError::NonFinite { .. })
                | TrainError::Objective(ObjectiveError::Numeric(_))
                | TrainError::Objective(ObjectiveError::Tensor(TensorError::NonFinite { .. }))
                | TrainError::Encoder(EncoderError::Tensor(TensorError::NonFinite { .. }))
                | TrainError::Decoder(DecoderError::Tensor(TensorError::NonFinite { .. }))
        )
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Everything that fixes the model layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub data: BatchConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub mode: BootstrapMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            data: BatchConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            mode: BootstrapMode::OnlineToTarget,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.context_size != self.data.m || self.encoder.exemplar_size != self.data.n {
            return Err(TrainError::Config(format!(
                "encoder sizes {}/{} disagree with data sizes m={} n={}",
                self.encoder.context_size, self.encoder.exemplar_size, self.data.m, self.data.n
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    /// Contexts per step.
    pub batch_size: usize,
    pub seed: u64,
    pub tau: f64,
    pub loss: LossConfig,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            warmup_steps: 100,
            peak_lr: 1e-3,
            weight_decay: 0.05,
            betas: (0.9, 0.95),
            batch_size: 8,
            seed: 0,
            tau: DEFAULT_TAU,
            loss: LossConfig::default(),
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |s: String| Err(TrainError::Config(s));
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return bad(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.peak_lr > 0.0) || !self.peak_lr.is_finite() {
            return bad(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        self.loss.validate()?;
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        lr_at(step, self.total_steps, self.warmup_steps, self.peak_lr)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

impl StepMetrics {
    pub const HEADER: &'static str = "step\tloss\tgrad_norm\tlr";

    pub fn tsv_row(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.step, self.loss, self.grad_norm, self.lr)
    }
}

/// Tab-separated metrics sink: header, then one row per step.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W) -> std::io::Result<Self> {
        writeln!(out, "{}", StepMetrics::HEADER)?;
        Ok(Self { out })
    }

    pub fn write(&mut self, m: &StepMetrics) -> std::io::Result<()> {
        writeln!(self.out, "{}", m.tsv_row())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Stream used for parameter initialization; data sampling uses the next.
const INIT_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;

/// Complete mutable training state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pair: EncoderPair,
    pub decoder: Decoder,
    pub decoder_params: ParamStore,
    pub enc_moments: Moments,
    pub dec_moments: Moments,
    /// Completed optimizer steps.
    pub step: u64,
    /// Data sampling stream.
    pub rng: ChaCha8Rng,
    /// Free-form config snapshot stored alongside checkpoints.
    pub config_text: String,
}

/// Fresh encoder and parameters exactly as [`TrainState::new`] draws them.
pub fn init_encoder(model: &ModelConfig, seed: u64) -> Result<(Encoder, ParamStore)> {
    let mut rng = seeded(seed, INIT_STREAM);
    Ok(Encoder::init(&model.encoder, &mut rng)?)
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Forward pass outputs for one set of batches.
pub struct Forward {
    pub tape: Tape,
    pub encoded: Encoded,
    pub decoder: Bound,
    /// `[B, K, m, m]` logits.
    pub logits: Var,
    pub loss: Var,
}

impl TrainState {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        let mut rng = seeded(train.seed, INIT_STREAM);
        let (encoder, theta) = Encoder::init(&model.encoder, &mut rng)?;
        let grid = model.encoder.grid(model.data.m);
        let (decoder, decoder_params) =
            Decoder::init(&model.decoder, encoder.out_dim(), grid, model.data.m, &mut rng)?;
        let pair = EncoderPair::new(encoder, theta, train.tau, model.mode)?;
        let enc_moments = Moments::zeros_like(pair.trained());
        let dec_moments = Moments::zeros_like(&decoder_params);
        Ok(Self {
            rng: seeded(train.seed, DATA_STREAM),
            model,
            train,
            pair,
            decoder,
            decoder_params,
            enc_moments,
            dec_moments,
            step: 0,
            config_text: String::new(),
        })
    }

    /// Draw `batch_size` images uniformly with replacement and build one
    /// context/exemplar batch from each.
    pub fn sample_batches(&mut self, images: &[Image]) -> Result<Vec<ExemplarContextBatch>> {
        if images.is_empty() {
            return Err(TrainError::Config("dataset is empty".into()));
        }
        (0..self.train.batch_size)
            .map(|_| {
                let i = self.rng.random_range(0..images.len());
                Ok(build_batch(&images[i], &self.model.data, &mut self.rng)?)
            })
            .collect()
    }

    /// Forward pass and loss. Only the trained encoder store and the
    /// decoder are differentiable.
    pub fn forward(&self, batches: &[ExemplarContextBatch]) -> Result<Forward> {
        let tape = Tape::new();
        let (b, k, m) = (batches.len(), self.model.data.k, self.model.data.m);
        if b == 0 || batches.iter().any(|x| x.exemplars.len() != k) {
            return Err(TrainError::Config(format!("expected a non-empty batch with {k} exemplars each")));
        }
        let contexts: Vec<Image> = batches.iter().map(|x| x.context.clone()).collect();
        let exemplars: Vec<Image> = batches.iter().flat_map(|x| x.exemplars.iter().cloned()).collect();
        let encoded = self.pair.encode(&tape, &exemplars, &contexts)?;
        let decoder = self.decoder_params.bind(&tape, true)?;
        let logits = self.decoder.forward(&tape, &decoder, encoded.h_z, encoded.h_c, k)?;
        let maps: Vec<_> = batches.iter().flat_map(|x| x.maps.iter()).collect();
        let y = objective::stack_maps(&maps).reshape(&[b, k, m, m])?;
        let loss = objective::loss(&tape, &self.train.loss, logits, &y)?;
        Ok(Forward {
            tape,
            encoded,
            decoder,
            logits,
            loss,
        })
    }

    /// Loss value without touching any state.
    pub fn eval_loss(&self, batches: &[ExemplarContextBatch]) -> Result<f64> {
        let f = self.forward(batches)?;
        Ok(f.tape.value(f.loss).item())
    }

    /// Logits `[B, K, m, m]` for the given batches.
    pub fn predict(&self, batches: &[ExemplarContextBatch]) -> Result<Tensor> {
        let f = self.forward(batches)?;
        Ok(f.tape.value(f.logits).as_ref().clone())
    }

    /// Mean IoU of thresholded predictions against the ground-truth maps.
    pub fn mean_iou(&self, batches: &[ExemplarContextBatch]) -> Result<f64> {
        let logits = self.predict(batches)?;
        let preds = objective::probability_maps(&logits);
        let gts = batches.iter().flat_map(|x| x.maps.iter());
        let total: f64 = preds.iter().zip(gts).map(|(p, y)| objective::iou_metric(p, y, 0.5)).sum();
        Ok(total / preds.len() as f64)
    }

    /// Run forward and backward, leaving gradients in the trained encoder
    /// store and the decoder store. Returns the loss.
    pub fn compute_grads(&mut self, batches: &[ExemplarContextBatch]) -> Result<f64> {
        self.pair.trained_mut().zero_grads();
        self.decoder_params.zero_grads();
        let f = self.forward(batches)?;
        let loss = f.tape.value(f.loss).item();
        f.tape.backward(f.loss)?;
        self.pair.accumulate_grads(&f.tape, &f.encoded);
        self.decoder_params.accumulate_grads(&f.tape, &f.decoder);
        Ok(loss)
    }

    /// One optimization step on the given batches.
    pub fn train_step(&mut self, batches: &[ExemplarContextBatch]) -> Result<StepMetrics> {
        let step = self.step;
        self.step_inner(batches).map_err(|e| {
            if e.is_numeric() && !matches!(e, TrainError::Numeric { .. }) {
                TrainError::Numeric {
                    step,
                    detail: e.to_string(),
                }
            } else {
                e
            }
        })
    }

    fn step_inner(&mut self, batches: &[ExemplarContextBatch]) -> Result<StepMetrics> {
        let step = self.step;
        let lr = self.train.lr(step);
        let loss = self.compute_grads(batches)?;
        if !optim::grads_finite(self.pair.trained()) || !optim::grads_finite(&self.decoder_params) {
            return Err(TrainError::Numeric {
                step,
                detail: "non-finite gradient".into(),
            });
        }
        let clip = self.train.grad_clip.unwrap_or(f64::INFINITY);
        let grad_norm = clip_global_norm(&mut [self.pair.trained_mut(), &mut self.decoder_params], clip);
        let t = self.step + 1;
        let cfg = self.train.adamw();
        adamw_step(self.pair.trained_mut(), &mut self.enc_moments, lr, t, &cfg);
        adamw_step(&mut self.decoder_params, &mut self.dec_moments, lr, t, &cfg);
        self.pair.trained_mut().zero_grads();
        self.decoder_params.zero_grads();
        if self.pair.has_separate_target() {
            self.pair.ema_update()?;
        }
        self.step += 1;
        Ok(StepMetrics {
            step,
            loss,
            grad_norm,
            lr,
        })
    }

    /// Sample and train until `total_steps`, writing one metrics row per step.
    pub fn run<W: Write>(&mut self, images: &[Image], mut metrics: Option<&mut MetricsWriter<W>>) -> Result<()> {
        while self.step < self.train.total_steps {
            let batches = self.sample_batches(images)?;
            let m = self.train_step(&batches)?;
            if let Some(w) = metrics.as_deref_mut() {
                w.write(&m)?;
            }
        }
        Ok(())
    }

    /// Snapshot every tensor plus the step, data stream position and config text.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        let mut push = |prefix: &str, store: &ParamStore| {
            for p in store.iter() {
                tensors.push((format!("{prefix}/{}", p.name), p.value.clone()));
            }
        };
        push("theta", self.pair.theta());
        if self.pair.has_separate_target() {
            push("xi", self.pair.xi());
        }
        push("decoder", &self.decoder_params);
        let mut push_moments = |prefix: &str, store: &ParamStore, mo: &Moments| {
            for (i, p) in store.iter().enumerate() {
                tensors.push((format!("{prefix}.m/{}", p.name), mo.m[i].clone()));
                tensors.push((format!("{prefix}.v/{}", p.name), mo.v[i].clone()));
            }
        };
        push_moments("opt.encoder", self.pair.trained(), &self.enc_moments);
        push_moments("opt.decoder", &self.decoder_params, &self.dec_moments);
        Checkpoint {
            step: self.step,
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
            config: self.config_text.clone(),
            tensors,
        }
    }

    /// Rebuild state from a checkpoint; every tensor must match the layout
    /// implied by `model` and the checkpoint must contain nothing else.
    pub fn from_checkpoint(model: ModelConfig, train: TrainConfig, mut ckpt: Checkpoint) -> Result<Self> {
        let mut state = Self::new(model, train)?;
        let fill = |prefix: &str, store: &mut ParamStore, ckpt: &mut Checkpoint| -> Result<()> {
            for p in store.iter_mut() {
                p.value = ckpt.take_tensor(&format!("{prefix}/{}", p.name), p.value.shape())?;
            }
            Ok(())
        };
        fill("theta", state.pair.theta_mut(), &mut ckpt)?;
        if state.pair.has_separate_target() {
            fill("xi", state.pair.xi_mut(), &mut ckpt)?;
        }
        fill("decoder", &mut state.decoder_params, &mut ckpt)?;
        let fill_moments = |prefix: &str, store: &ParamStore, mo: &mut Moments, ckpt: &mut Checkpoint| -> Result<()> {
            for (i, p) in store.iter().enumerate() {
                mo.m[i] = ckpt.take_tensor(&format!("{prefix}.m/{}", p.name), p.value.shape())?;
                mo.v[i] = ckpt.take_tensor(&format!("{prefix}.v/{}", p.name), p.value.shape())?;
            }
            Ok(())
        };
        let trained = state.pair.trained().clone();
        fill_moments("opt.encoder", &trained, &mut state.enc_moments, &mut ckpt)?;
        fill_moments("opt.decoder", &state.decoder_params, &mut state.dec_moments, &mut ckpt)?;
        if let Some((name, _)) = ckpt.tensors.first() {
            return Err(CheckpointError::UnexpectedTensor(name.clone()).into());
        }
        state.step = ckpt.step;
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        rng.set_stream(ckpt.rng.stream);
        rng.set_word_pos(ckpt.rng.word_pos);
        state.rng = rng;
        state.config_text = ckpt.config;
        Ok(state)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load_checkpoint(path: &Path, model: ModelConfig, train: TrainConfig) -> Result<Self> {
        Self::from_checkpoint(model, train, Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests;
