//! The `cim` subcommands as library functions.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::config::{AppConfig, ConfigError};
use super::ppm::{self, PpmError};
use super::probe::{probe_accuracy, ProbeSettings};
use super::synthetic::{gen_synthetic, Dataset, SyntheticSpec, NUM_CLASSES};
use super::visualize::triptych;
use crate::encoder::EncoderError;
use crate::geometry::{build_batch, ExemplarContextBatch, Image};
use crate::objective::probability_maps;
use crate::trainer::{init_encoder, MetricsWriter, TrainError, TrainState};
use crate::verify::{self, CheckResult};

pub const CHECKPOINT_FILE: &str = "checkpoint.cimk";
pub const METRICS_FILE: &str = "metrics.tsv";

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Image(#[from] PpmError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("{0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, AppError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AppError + '_ {
    move |e| AppError::Io(format!("{}: {e}", path.display()))
}

pub fn checkpoint_path(cfg: &AppConfig) -> PathBuf {
    cfg.out_dir.join(CHECKPOINT_FILE)
}

pub fn metrics_path(cfg: &AppConfig) -> PathBuf {
    cfg.out_dir.join(METRICS_FILE)
}

/// The configured folder, or the synthetic set.
pub fn load_dataset(cfg: &AppConfig) -> Result<Dataset> {
    match &cfg.dataset.folder {
        Some(dir) => {
            let ds = Dataset::load(dir)?;
            if ds.is_empty() {
                return Err(AppError::Data(format!("no .ppm images in {}", dir.display())));
            }
            if let Some(img) = ds.images.iter().find(|x| x.width().min(x.height()) < 2) {
                return Err(AppError::Data(format!("image of {}x{} is too small", img.width(), img.height())));
            }
            Ok(ds)
        }
        None => Ok(gen_synthetic(&cfg.dataset.synthetic, cfg.dataset.seed)),
    }
}

/// Pre-training images and the held-out tail.
pub fn split_holdout(cfg: &AppConfig, ds: &Dataset) -> (Vec<Image>, Vec<Image>) {
    let keep = ds.len().saturating_sub(cfg.dataset.holdout).max(1).min(ds.len());
    (ds.images[..keep].to_vec(), ds.images[keep..].to_vec())
}

/// One batch per image from a dedicated stream.
pub fn eval_batches(cfg: &AppConfig, images: &[Image], seed: u64) -> Result<Vec<ExemplarContextBatch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    images
        .iter()
        .map(|x| build_batch(x, &cfg.data, &mut rng).map_err(|e| AppError::Train(e.into())))
        .collect()
}

/// Mean IoU over `batches`, evaluated in groups of `batch_size`.
pub fn mean_iou(state: &TrainState, batches: &[ExemplarContextBatch]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in batches.chunks(state.train.batch_size) {
        total += state.mean_iou(chunk)? * chunk.len() as f64;
    }
    Ok(total / batches.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub holdout_iou: Option<f64>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Train to `total_steps`, then write the checkpoint. Metrics stream to
/// `metrics.tsv` as training runs.
pub fn cmd_pretrain(cfg: &AppConfig) -> Result<PretrainReport> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let ds = load_dataset(cfg)?;
    let (train, holdout) = split_holdout(cfg, &ds);
    let mut state = TrainState::new(cfg.model(), cfg.train.clone())?;
    state.config_text = cfg.to_text();
    let mpath = metrics_path(cfg);
    let file = File::create(&mpath).map_err(io_err(&mpath))?;
    let mut writer = MetricsWriter::new(BufWriter::new(file)).map_err(io_err(&mpath))?;
    let mut final_loss = None;
    while state.step < state.train.total_steps {
        let batches = state.sample_batches(&train)?;
        let m = state.train_step(&batches)?;
        writer.write(&m).map_err(io_err(&mpath))?;
        final_loss = Some(m.loss);
    }
    use std::io::Write;
    writer.into_inner().flush().map_err(io_err(&mpath))?;
    let cpath = checkpoint_path(cfg);
    state.save_checkpoint(&cpath)?;
    let holdout_iou = if holdout.is_empty() {
        None
    } else {
        Some(mean_iou(&state, &eval_batches(cfg, &holdout, cfg.dataset.seed ^ 0x5eed)?)?)
    };
    Ok(PretrainReport {
        steps: state.step,
        final_loss,
        holdout_iou,
        checkpoint: cpath,
        metrics: mpath,
    })
}

pub fn load_state(cfg: &AppConfig) -> Result<TrainState> {
    cfg.validate()?;
    Ok(TrainState::load_checkpoint(&checkpoint_path(cfg), cfg.model(), cfg.train.clone())?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub pretrained: f64,
    pub random_init: f64,
    pub classes: usize,
    pub train_count: usize,
    pub test_count: usize,
}

/// Labelled shapes for probing, drawn independently of pre-training data.
pub fn probe_data(cfg: &AppConfig) -> (Dataset, Dataset) {
    let spec = SyntheticSpec {
        count: cfg.probe.train_count + cfg.probe.test_count,
        size: cfg.dataset.synthetic.size,
        min_shapes: 1,
        max_shapes: 3,
    };
    gen_synthetic(&spec, cfg.probe.seed).split_at(cfg.probe.train_count)
}

/// Probe the checkpoint's θ and a freshly initialized encoder from the same
/// seed on identical data.
pub fn cmd_probe(cfg: &AppConfig) -> Result<ProbeReport> {
    let state = load_state(cfg)?;
    let (train, test) = probe_data(cfg);
    let settings = ProbeSettings {
        steps: cfg.probe.steps,
        lr: cfg.probe.lr,
        weight_decay: cfg.probe.weight_decay,
        seed: cfg.probe.seed,
    };
    let labels = |d: &Dataset| d.labels.clone().expect("probe data is labelled");
    let (ltr, lte) = (labels(&train), labels(&test));
    let run = |enc: &crate::encoder::Encoder, params: &crate::tensor::ParamStore| {
        probe_accuracy(enc, params, (&train.images, &ltr), (&test.images, &lte), NUM_CLASSES, &settings)
    };
    let pretrained = run(&state.pair.encoder, state.pair.theta())?;
    let (enc0, theta0) = init_encoder(&state.model, state.train.seed)?;
    let random_init = run(&enc0, &theta0)?;
    Ok(ProbeReport {
        pretrained,
        random_init,
        classes: NUM_CLASSES,
        train_count: train.len(),
        test_count: test.len(),
    })
}

/// Write `count` triptychs (plus each exemplar) for held-out images.
pub fn cmd_visualize(cfg: &AppConfig) -> Result<Vec<PathBuf>> {
    let dir = &cfg.visualize.out_dir;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    if cfg.visualize.count == 0 {
        return Ok(Vec::new());
    }
    let state = load_state(cfg)?;
    let ds = load_dataset(cfg)?;
    let (train, holdout) = split_holdout(cfg, &ds);
    let pool = if holdout.is_empty() { &train } else { &holdout };
    let images: Vec<Image> = (0..cfg.visualize.count).map(|i| pool[i % pool.len()].clone()).collect();
    let batches = eval_batches(cfg, &images, cfg.visualize.seed)?;
    let mut written = Vec::new();
    for (i, b) in batches.iter().enumerate() {
        let logits = state.predict(std::slice::from_ref(b))?;
        let preds = probability_maps(&logits);
        let panel = triptych(&b.context, &b.maps[0], &preds[0]);
        let p = dir.join(format!("{i:03}.ppm"));
        ppm::write_image(&p, &panel)?;
        let e = dir.join(format!("{i:03}_exemplar.ppm"));
        ppm::write_image(&e, &b.exemplars[0])?;
        written.extend([p, e]);
    }
    Ok(written)
}

/// Generate the configured synthetic set into `dataset.export_dir`.
pub fn cmd_gen_data(cfg: &AppConfig) -> Result<Dataset> {
    cfg.validate()?;
    let ds = gen_synthetic(&cfg.dataset.synthetic, cfg.dataset.seed);
    ds.save(&cfg.dataset.export_dir)?;
    Ok(ds)
}

pub const GRADCHECK_SEEDS: u64 = 20;

/// Run the full gradient suite; `Ok` carries every result, pass or fail.
pub fn cmd_gradcheck() -> Vec<CheckResult> {
    verify::full_suite(GRADCHECK_SEEDS)
}
