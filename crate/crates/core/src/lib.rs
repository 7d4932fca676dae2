//! Self-supervised pre-training by crop-and-correlate: an encoder sees a
//! context image and rotated, rescaled crops (exemplars) of it, and a
//! light decoder predicts where each exemplar came from as a dense binary
//! map. Everything runs on a small f64 tensor library with reverse-mode
//! autodiff, so the whole pipeline is gradient-checkable.
//!
//! Module order follows the data flow: [`tensor`] and [`nn`] underneath,
//! then [`geometry`] (crops, maps, batches), [`encoder`], [`decoder`],
//! [`objective`], [`trainer`], and the [`app`] layer behind the `cim` CLI.

pub mod decoder;
pub mod encoder;
pub mod geometry;
pub mod nn;
pub mod objective;
pub mod tensor;
pub mod trainer;
pub mod verify;
pub mod app;

pub use app::{AppConfig, AppError, ConfigError};
pub use decoder::{CorrelationOp, Decoder, DecoderConfig, DecoderError, Predictor};
pub use encoder::{Backbone, BootstrapMode, ConvConfig, Encoder, EncoderConfig, EncoderError, EncoderPair, ViTConfig};
pub use geometry::{BatchConfig, CorrelationMap, CropConfig, CropParams, ExemplarContextBatch, GeometryError, Image};
pub use objective::{LossConfig, LossKind, ObjectiveError};
pub use tensor::{ParamStore, Tape, Tensor, TensorError, Var};
pub use trainer::{Checkpoint, CheckpointError, ModelConfig, StepMetrics, TrainConfig, TrainError, TrainState};
