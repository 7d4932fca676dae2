//! Flat `key = value` run configuration.
//!
//! Every knob of every module is one dotted key. [`AppConfig::to_text`]
//! writes all keys and [`AppConfig::parse`] reads any subset over the
//! defaults, so the two round-trip.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use super::synthetic::SyntheticSpec;
use crate::decoder::{CorrelationOp, DecoderConfig, Predictor};
use crate::encoder::{Backbone, BootstrapMode, ConvConfig, EncoderConfig, ViTConfig};
use crate::geometry::BatchConfig;
use crate::objective::LossKind;
use crate::trainer::{ModelConfig, TrainConfig, TrainError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{key}`{}", suggestion.as_ref().map(|s| format!("; did you mean `{s}`?")).unwrap_or_default())]
    UnknownKey { key: String, suggestion: Option<String> },
    #[error("bad value for `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("config io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneKind {
    Vit,
    Conv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    /// Folder of `.ppm` files; `None` generates synthetic images.
    pub folder: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub seed: u64,
    /// Trailing images held out of pre-training for map evaluation.
    pub holdout: usize,
    /// Where `gen-data` writes.
    pub export_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub steps: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualizeConfig {
    pub count: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AppConfig {
    pub data: BatchConfig,
    pub backbone: BackboneKind,
    pub vit: ViTConfig,
    pub conv: ConvConfig,
    pub mode: BootstrapMode,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
    pub probe: ProbeConfig,
    pub visualize: VisualizeConfig,
    /// Run directory for the checkpoint and metrics.
    pub out_dir: PathBuf,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            data: BatchConfig::default(),
            backbone: BackboneKind::Vit,
            vit: ViTConfig::default(),
            conv: ConvConfig::default(),
            mode: BootstrapMode::OnlineToTarget,
            decoder: DecoderConfig::default(),
            train: TrainConfig::default(),
            dataset: DatasetConfig {
                folder: None,
                synthetic: SyntheticSpec::default(),
                seed: 1,
                holdout: 200,
                export_dir: PathBuf::from("data"),
            },
            probe: ProbeConfig {
                train_count: 600,
                test_count: 600,
                steps: 300,
                lr: 1e-2,
                weight_decay: 1e-4,
                seed: 2,
            },
            visualize: VisualizeConfig {
                count: 8,
                seed: 3,
                out_dir: PathBuf::from("run/vis"),
            },
            out_dir: PathBuf::from("run"),
        }
    }
}

/// Conversion between a field and its text form.
trait Value: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn show(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                parse_plain(s)
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

fn parse_plain<T: FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    s.parse::<T>().map_err(|e| format!("`{s}`: {e}"))
}

plain_value!(f64, usize, u64);

impl Value for Option<f64> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s == "none" {
            Ok(None)
        } else {
            parse_plain(s).map(Some)
        }
    }
    fn show(&self) -> String {
        self.map_or_else(|| "none".into(), |v| v.to_string())
    }
}

impl Value for PathBuf {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Err("empty path".into());
        }
        Ok(PathBuf::from(s))
    }
    fn show(&self) -> String {
        self.display().to_string()
    }
}

/// `synthetic` or a folder path.
impl Value for Option<PathBuf> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s == "synthetic" {
            Ok(None)
        } else {
            PathBuf::parse_value(s).map(Some)
        }
    }
    fn show(&self) -> String {
        self.as_ref().map_or_else(|| "synthetic".into(), |p| p.display().to_string())
    }
}

impl Value for [usize; 4] {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: Vec<usize> = s
            .split(',')
            .map(|p| parse_plain(p.trim()))
            .collect::<std::result::Result<_, _>>()?;
        v.try_into().map_err(|v: Vec<usize>| format!("expected 4 comma-separated values, got {}", v.len()))
    }
    fn show(&self) -> String {
        self.map(|v| v.to_string()).join(",")
    }
}

macro_rules! enum_value {
    ($t:ty { $($name:literal => $v:expr),* $(,)? }) => {
        impl Value for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($v),)*
                    _ => Err(format!("`{s}` is not one of: {}", [$($name),*].join(", "))),
                }
            }
            fn show(&self) -> String {
                $(if *self == $v { return $name.to_string(); })*
                unreachable!()
            }
        }
    };
}

enum_value!(BackboneKind { "vit" => BackboneKind::Vit, "conv" => BackboneKind::Conv });
enum_value!(BootstrapMode {
    "shared" => BootstrapMode::Shared,
    "online_to_target" => BootstrapMode::OnlineToTarget,
    "target_to_online" => BootstrapMode::TargetToOnline,
});
enum_value!(Predictor { "linear" => Predictor::Linear, "deep_deconv" => Predictor::DeepDeconv });
enum_value!(CorrelationOp {
    "cross_attention" => CorrelationOp::CrossAttention,
    "convolution" => CorrelationOp::Convolution,
});
enum_value!(LossKind {
    "bce" => LossKind::Bce,
    "balanced_ce" => LossKind::BalancedCe,
    "mse" => LossKind::Mse,
    "focal" => LossKind::Focal,
});

struct Key {
    name: &'static str,
    doc: &'static str,
    get: fn(&AppConfig) -> String,
    set: fn(&mut AppConfig, &str) -> std::result::Result<(), String>,
}

macro_rules! key {
    ($name:literal, $doc:literal, $($f:tt).+) => {
        Key {
            name: $name,
            doc: $doc,
            get: |c| Value::show(&c.$($f).+),
            set: |c, v| {
                c.$($f).+ = Value::parse_value(v)?;
                Ok(())
            },
        }
    };
}

const KEYS: &[Key] = &[
    key!("data.m", "context side in pixels", data.m),
    key!("data.n", "exemplar side in pixels", data.n),
    key!("data.k", "exemplars per context", data.k),
    key!("crop.r0_min", "lower bound of the crop area ratio", data.crop.r0_min),
    key!("crop.r0_max", "upper bound of the crop area ratio (at most 1)", data.crop.r0_max),
    key!("crop.r1_min", "lower bound of the crop height/width ratio", data.crop.r1_min),
    key!("crop.r1_max", "upper bound of the crop height/width ratio", data.crop.r1_max),
    key!("crop.alpha_min", "lower bound of the crop rotation in degrees", data.crop.alpha_min),
    key!("crop.alpha_max", "upper bound of the crop rotation in degrees", data.crop.alpha_max),
    key!("augment.flip_p", "exemplar horizontal flip probability", data.augment.flip_p),
    key!("augment.jitter_p", "exemplar color jitter probability", data.augment.jitter_p),
    key!("augment.grayscale_p", "exemplar grayscale probability", data.augment.grayscale_p),
    key!("augment.blur_p", "exemplar Gaussian blur probability", data.augment.blur_p),
    key!("augment.solarize_p", "exemplar solarize probability", data.augment.solarize_p),
    key!("encoder.backbone", "vit or conv", backbone),
    key!("encoder.mode", "shared, online_to_target or target_to_online", mode),
    key!("encoder.patch_size", "ViT patch side", vit.patch_size),
    key!("encoder.embed_dim", "ViT token width", vit.embed_dim),
    key!("encoder.depth", "ViT block count", vit.depth),
    key!("encoder.heads", "ViT attention heads", vit.heads),
    key!("encoder.mlp_ratio", "ViT MLP hidden width multiplier", vit.mlp_ratio),
    key!("encoder.conv_widths", "channel widths of the four conv stages", conv.widths),
    key!("decoder.width", "decoder embedding width", decoder.width),
    key!("decoder.heads", "decoder attention heads", decoder.heads),
    key!("decoder.depth", "decoder layer count", decoder.depth),
    key!("decoder.mlp_ratio", "decoder MLP hidden width multiplier", decoder.mlp_ratio),
    key!("decoder.predictor", "linear or deep_deconv", decoder.predictor),
    key!("decoder.correlation_op", "cross_attention or convolution", decoder.correlation_op),
    key!("loss.kind", "bce, balanced_ce, mse or focal", train.loss.kind),
    key!("loss.focal_gamma", "focal loss focusing exponent", train.loss.focal_gamma),
    key!("loss.focal_alpha", "focal loss weight", train.loss.focal_alpha),
    key!("train.total_steps", "optimizer steps", train.total_steps),
    key!("train.warmup_steps", "linear warmup steps", train.warmup_steps),
    key!("train.peak_lr", "learning rate after warmup", train.peak_lr),
    key!("train.weight_decay", "decoupled weight decay", train.weight_decay),
    key!("train.beta1", "AdamW first moment decay", train.betas.0),
    key!("train.beta2", "AdamW second moment decay", train.betas.1),
    key!("train.batch_size", "contexts per step", train.batch_size),
    key!("train.seed", "initialization and sampling seed", train.seed),
    key!("train.tau", "EMA momentum of the target encoder", train.tau),
    key!("train.grad_clip", "max global gradient norm, or none", train.grad_clip),
    key!("dataset.source", "synthetic or a folder of .ppm files", dataset.folder),
    key!("dataset.count", "synthetic image count", dataset.synthetic.count),
    key!("dataset.size", "synthetic image side", dataset.synthetic.size),
    key!("dataset.min_shapes", "fewest shapes per synthetic image", dataset.synthetic.min_shapes),
    key!("dataset.max_shapes", "most shapes per synthetic image (0 for background only)", dataset.synthetic.max_shapes),
    key!("dataset.seed", "synthetic generation seed", dataset.seed),
    key!("dataset.holdout", "trailing images kept out of pre-training", dataset.holdout),
    key!("dataset.export_dir", "gen-data output folder", dataset.export_dir),
    key!("probe.train_count", "labelled images for fitting the probe", probe.train_count),
    key!("probe.test_count", "labelled images for scoring the probe", probe.test_count),
    key!("probe.steps", "probe optimizer steps", probe.steps),
    key!("probe.lr", "probe peak learning rate", probe.lr),
    key!("probe.weight_decay", "probe weight decay", probe.weight_decay),
    key!("probe.seed", "probe data seed", probe.seed),
    key!("visualize.count", "triptychs to write", visualize.count),
    key!("visualize.seed", "sampling seed for visualized batches", visualize.seed),
    key!("visualize.out_dir", "triptych output folder", visualize.out_dir),
    key!("output.dir", "run folder for checkpoint and metrics", out_dir),
];

fn find_key(name: &str) -> Result<&'static Key> {
    KEYS.iter().find(|k| k.name == name).ok_or_else(|| ConfigError::UnknownKey {
        key: name.to_string(),
        suggestion: KEYS
            .iter()
            .map(|k| (strsim::levenshtein(name, k.name), k.name))
            .min()
            .map(|(_, n)| n.to_string()),
    })
}

impl AppConfig {
    pub fn key_names() -> impl Iterator<Item = &'static str> {
        KEYS.iter().map(|k| k.name)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = find_key(key)?;
        (k.set)(self, value.trim()).map_err(|msg| ConfigError::BadValue {
            key: key.to_string(),
            msg,
        })
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok((find_key(key)?.get)(self))
    }

    /// Defaults overridden by the file's keys. Does not validate.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(ConfigError::Duplicate {
                    line: i + 1,
                    key: k.to_string(),
                });
            }
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every key with its current value.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{} = {}\n", k.name, (k.get)(self))).collect()
    }

    /// Defaults with one comment line per key.
    pub fn documented_defaults() -> String {
        let d = Self::default();
        KEYS.iter()
            .map(|k| format!("# {}\n{} = {}\n", k.doc, k.name, (k.get)(&d)))
            .collect()
    }

    pub fn model(&self) -> ModelConfig {
        let backbone = match self.backbone {
            BackboneKind::Vit => Backbone::Vit(self.vit.clone()),
            BackboneKind::Conv => Backbone::Conv(self.conv.clone()),
        };
        ModelConfig {
            data: self.data.clone(),
            encoder: EncoderConfig {
                backbone,
                context_size: self.data.m,
                exemplar_size: self.data.n,
            },
            decoder: self.decoder.clone(),
            mode: self.mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: TrainError| ConfigError::Invalid(e.to_string());
        self.model().validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        if self.dataset.folder.is_none() {
            self.dataset.synthetic.validate(2 * self.data.m).map_err(ConfigError::Invalid)?;
        }
        if self.probe.train_count == 0 || self.probe.test_count == 0 {
            return Err(ConfigError::Invalid("probe needs non-empty train and test splits".into()));
        }
        if !(self.probe.lr > 0.0) {
            return Err(ConfigError::Invalid(format!("probe.lr must be positive, got {}", self.probe.lr)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        AppConfig::default().validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = AppConfig::default();
        c.set("train.peak_lr", "0.00123").unwrap();
        c.set("train.grad_clip", "none").unwrap();
        c.set("decoder.predictor", "deep_deconv").unwrap();
        c.set("encoder.conv_widths", "8, 16,32,64").unwrap();
        c.set("dataset.source", "/tmp/images").unwrap();
        c.set("crop.alpha_min", "-0.1").unwrap();
        let back = AppConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
        assert_eq!(AppConfig::parse(&AppConfig::documented_defaults()).unwrap(), AppConfig::default());
    }

    #[test]
    fn every_key_round_trips_its_default() {
        let d = AppConfig::default();
        for k in AppConfig::key_names() {
            let mut c = d.clone();
            let v = c.get(k).unwrap();
            c.set(k, &v).unwrap();
            assert_eq!(c, d, "{k}");
        }
        let names: std::collections::HashSet<_> = AppConfig::key_names().collect();
        assert_eq!(names.len(), KEYS.len());
    }

    #[test]
    fn comments_blank_lines_and_whitespace() {
        let c = AppConfig::parse("# header\n\n  decoder.width =  32  # inline\ntrain.seed=5\n").unwrap();
        assert_eq!(c.decoder.width, 32);
        assert_eq!(c.train.seed, 5);
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let err = AppConfig::parse("decoder.widht = 3\n").unwrap_err();
        assert_eq!(
            err,
            ConfigError::UnknownKey {
                key: "decoder.widht".into(),
                suggestion: Some("decoder.width".into())
            }
        );
        assert!(err.to_string().contains("did you mean `decoder.width`"));
    }

    #[test]
    fn bad_values_and_syntax() {
        assert!(matches!(
            AppConfig::parse("train.seed = -1"),
            Err(ConfigError::BadValue { key, .. }) if key == "train.seed"
        ));
        assert!(matches!(
            AppConfig::parse("loss.kind = hinge"),
            Err(ConfigError::BadValue { msg, .. }) if msg.contains("focal")
        ));
        assert!(matches!(AppConfig::parse("just words"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(
            AppConfig::parse("data.k = 2\ndata.k = 3"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
    }

    #[test]
    fn model_sizes_follow_data_sizes() {
        let mut c = AppConfig::default();
        c.set("data.m", "32").unwrap();
        c.set("data.n", "16").unwrap();
        c.set("dataset.size", "64").unwrap();
        let m = c.model();
        assert_eq!((m.encoder.context_size, m.encoder.exemplar_size), (32, 16));
        c.validate().unwrap();
    }

    #[test]
    fn validation_catches_cross_module_errors() {
        let mut c = AppConfig::default();
        c.set("dataset.size", "100").unwrap();
        assert!(matches!(c.validate(), Err(ConfigError::Invalid(_))));
        let mut c = AppConfig::default();
        c.set("decoder.heads", "5").unwrap();
        assert!(c.validate().is_err());
        let mut c = AppConfig::default();
        c.set("train.warmup_steps", "5000").unwrap();
        assert!(c.validate().is_err());
    }
}
