//! Backbones and the online/target encoder pair.
//!
//! An [`Encoder`] is a parameter layout plus forward code; the weights live
//! in a [`ParamStore`]. Because the layout is built deterministically from
//! the config, the online and target stores of an [`EncoderPair`] line up
//! entry for entry and one `Encoder` drives both.

use rand::Rng;
use thiserror::Error;

use crate::geometry::Image;
use crate::nn::{self, Init, LayerNorm, Linear, Mlp, INIT_STD};
use crate::tensor::{Bound, ParamId, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("encoder config error: {0}")]
    Config(String),
    #[error("encoder contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

/// Four 3x3 conv stages with strides 2, 2, 2, 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvConfig {
    pub widths: [usize; 4],
}

impl Default for ConvConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64, 64],
        }
    }
}

pub const CONV_STRIDES: [usize; 4] = [2, 2, 2, 1];
pub const CONV_TOTAL_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub enum Backbone {
    Vit(ViTConfig),
    Conv(ConvConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub backbone: Backbone,
    /// Context side `m`.
    pub context_size: usize,
    /// Exemplar side `n`.
    pub exemplar_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Vit(ViTConfig::default()),
            context_size: 64,
            exemplar_size: 32,
        }
    }
}

impl EncoderConfig {
    /// Pixels per output token along one axis.
    pub fn token_stride(&self) -> usize {
        match &self.backbone {
            Backbone::Vit(v) => v.patch_size,
            Backbone::Conv(_) => CONV_TOTAL_STRIDE,
        }
    }

    pub fn out_dim(&self) -> usize {
        match &self.backbone {
            Backbone::Vit(v) => v.embed_dim,
            Backbone::Conv(c) => c.widths[3],
        }
    }

    /// Side of the token grid for an input of side `s`.
    pub fn grid(&self, s: usize) -> usize {
        s / self.token_stride()
    }

    pub fn validate(&self) -> Result<()> {
        let stride = self.token_stride();
        if stride == 0 {
            return Err(EncoderError::Config("patch size must be positive".into()));
        }
        for (name, s) in [("context", self.context_size), ("exemplar", self.exemplar_size)] {
            if s == 0 || s % stride != 0 {
                return Err(EncoderError::Config(format!(
                    "{name} size {s} is not divisible by {stride}"
                )));
            }
        }
        match &self.backbone {
            Backbone::Vit(v) => {
                if v.embed_dim == 0 || v.heads == 0 || v.embed_dim % v.heads != 0 {
                    return Err(EncoderError::Config(format!(
                        "embed_dim {} is not divisible by heads {}",
                        v.embed_dim, v.heads
                    )));
                }
                if v.mlp_ratio == 0 {
                    return Err(EncoderError::Config("mlp_ratio must be positive".into()));
                }
            }
            Backbone::Conv(c) => {
                if c.widths.contains(&0) {
                    return Err(EncoderError::Config("conv widths must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// Which input resolution (and so which position table) a forward uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    Context,
    Exemplar,
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    ln2: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
struct Vit {
    cfg: ViTConfig,
    patch: Linear,
    pos_ctx: ParamId,
    pos_ex: ParamId,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug, PartialEq)]
struct Conv {
    stages: Vec<(ParamId, ParamId)>,
}

#[derive(Clone, Debug, PartialEq)]
enum Arch {
    Vit(Vit),
    Conv(Conv),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    cfg: EncoderConfig,
    arch: Arch,
}

impl Encoder {
    /// Build the layout and a freshly initialized store.
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let arch = match &cfg.backbone {
            Backbone::Vit(v) => {
                let d = v.embed_dim;
                let p = v.patch_size;
                let patch = Linear::new(&mut store, "patch_embed", 3 * p * p, d, true, Init::TruncNormal(INIT_STD), rng);
                let tc = cfg.grid(cfg.context_size).pow(2);
                let tz = cfg.grid(cfg.exemplar_size).pow(2);
                let pos_ctx = store.add("pos_embed.context", nn::trunc_normal(&[tc, d], INIT_STD, rng), false);
                let pos_ex = store.add("pos_embed.exemplar", nn::trunc_normal(&[tz, d], INIT_STD, rng), false);
                let std = Init::TruncNormal(INIT_STD);
                let blocks = (0..v.depth)
                    .map(|i| {
                        let name = format!("blocks.{i}");
                        let s = &mut store;
                        Block {
                            ln1: LayerNorm::new(s, &format!("{name}.norm1"), d),
                            q: Linear::new(s, &format!("{name}.attn.q"), d, d, true, std, rng),
                            k: Linear::new(s, &format!("{name}.attn.k"), d, d, true, std, rng),
                            v: Linear::new(s, &format!("{name}.attn.v"), d, d, true, std, rng),
                            proj: Linear::new(s, &format!("{name}.attn.proj"), d, d, true, Init::Zeros, rng),
                            ln2: LayerNorm::new(s, &format!("{name}.norm2"), d),
                            mlp: Mlp::new(s, &format!("{name}.mlp"), d, d * v.mlp_ratio, rng),
                        }
                    })
                    .collect();
                Arch::Vit(Vit {
                    cfg: v.clone(),
                    patch,
                    pos_ctx,
                    pos_ex,
                    blocks,
                })
            }
            Backbone::Conv(c) => {
                let mut cin = 3;
                let stages = c
                    .widths
                    .iter()
                    .enumerate()
                    .map(|(i, &cout)| {
                        let std = (2.0 / (cin * 9) as f64).sqrt();
                        let k = store.add(format!("stages.{i}.weight"), nn::normal(&[cout, cin, 3, 3], std, rng), true);
                        let b = store.add(format!("stages.{i}.bias"), Tensor::zeros(&[cout]), false);
                        cin = cout;
                        (k, b)
                    })
                    .collect();
                Arch::Conv(Conv { stages })
            }
        };
        Ok((
            Self {
                cfg: cfg.clone(),
                arch,
            },
            store,
        ))
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn out_dim(&self) -> usize {
        self.cfg.out_dim()
    }

    fn side(&self, res: Resolution) -> usize {
        match res {
            Resolution::Context => self.cfg.context_size,
            Resolution::Exemplar => self.cfg.exemplar_size,
        }
    }

    fn check_images(&self, images: &[Image], res: Resolution) -> Result<usize> {
        let s = self.side(res);
        if images.is_empty() {
            return Err(EncoderError::Contract("no images to encode".into()));
        }
        for img in images {
            if img.height() != s || img.width() != s {
                return Err(EncoderError::Config(format!(
                    "{res:?} input must be {s}x{s}, got {}x{}",
                    img.height(),
                    img.width()
                )));
            }
        }
        Ok(s)
    }

    /// Patch tokens plus the position table for `res`: `[B, T, D]`.
    /// ViT only.
    pub fn patch_embed(&self, tape: &Tape, p: &Bound, images: &[Image], res: Resolution) -> Result<Var> {
        let Arch::Vit(vit) = &self.arch else {
            return Err(EncoderError::Contract("patch_embed needs a ViT backbone".into()));
        };
        let s = self.check_images(images, res)?;
        let ps = vit.cfg.patch_size;
        let t = (s / ps).pow(2);
        let mut data = Vec::with_capacity(images.len() * t * 3 * ps * ps);
        for img in images {
            data.extend(img.to_patches(ps));
        }
        let x = tape.constant(Tensor::new(&[images.len(), t, 3 * ps * ps], data)?)?;
        let x = vit.patch.forward(tape, p, x)?;
        let pos = match res {
            Resolution::Context => vit.pos_ctx,
            Resolution::Exemplar => vit.pos_ex,
        };
        Ok(tape.add(x, p[pos])?)
    }

    /// The transformer blocks applied to already-embedded tokens `[.., T, D]`.
    pub fn vit_blocks(&self, tape: &Tape, p: &Bound, mut x: Var) -> Result<Var> {
        let Arch::Vit(vit) = &self.arch else {
            return Err(EncoderError::Contract("vit_blocks needs a ViT backbone".into()));
        };
        for b in &vit.blocks {
            let h = b.ln1.forward(tape, p, x)?;
            let q = b.q.forward(tape, p, h)?;
            let k = b.k.forward(tape, p, h)?;
            let v = b.v.forward(tape, p, h)?;
            let a = nn::attention(tape, q, k, v, vit.cfg.heads)?;
            let a = b.proj.forward(tape, p, a)?;
            x = tape.add(x, a)?;
            let h = b.ln2.forward(tape, p, x)?;
            let h = b.mlp.forward(tape, p, h)?;
            x = tape.add(x, h)?;
        }
        Ok(x)
    }

    fn conv_forward(&self, conv: &Conv, tape: &Tape, p: &Bound, images: &[Image], res: Resolution) -> Result<Var> {
        let s = self.check_images(images, res)?;
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for img in images {
            data.extend_from_slice(img.pixels());
        }
        let mut x = tape.constant(Tensor::new(&[images.len(), 3, s, s], data)?)?;
        let last = conv.stages.len() - 1;
        for (i, &(k, b)) in conv.stages.iter().enumerate() {
            x = tape.conv2d(x, p[k], Some(p[b]), CONV_STRIDES[i], 1)?;
            if i != last {
                x = tape.gelu(x)?;
            }
        }
        let shape = tape.shape(x);
        let (n, c, g) = (shape[0], shape[1], shape[2] * shape[3]);
        let x = tape.reshape(x, &[n, c, g])?;
        Ok(tape.permute(x, &[0, 2, 1])?)
    }

    /// Encode a batch of same-size images into `[B, T, D]` tokens.
    pub fn forward(&self, tape: &Tape, p: &Bound, images: &[Image], res: Resolution) -> Result<Var> {
        match &self.arch {
            Arch::Vit(_) => {
                let x = self.patch_embed(tape, p, images, res)?;
                self.vit_blocks(tape, p, x)
            }
            Arch::Conv(c) => self.conv_forward(c, tape, p, images, res),
        }
    }
}

/// How the two encoders share work (and which one is trained).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BootstrapMode {
    /// One set of weights encodes both inputs and is trained directly.
    Shared,
    /// Exemplars go through the trained online weights θ; the context
    /// through the target ξ, which follows θ by EMA.
    OnlineToTarget,
    /// Roles swapped: the context branch ξ is trained, and θ (exemplar
    /// branch) follows it by EMA.
    TargetToOnline,
}

pub const DEFAULT_TAU: f64 = 0.996;

/// Online weights θ, target weights ξ, and how they relate.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderPair {
    pub encoder: Encoder,
    theta: ParamStore,
    /// `None` in shared mode, where ξ aliases θ.
    xi: Option<ParamStore>,
    pub tau: f64,
    mode: BootstrapMode,
}

/// Encoder outputs for one step, plus the bindings needed to read back
/// gradients.
pub struct Encoded {
    /// `[B*K, Tz, D]`.
    pub h_z: Var,
    /// `[B, Tc, D]`.
    pub h_c: Var,
    theta: Bound,
    xi: Option<Bound>,
}

impl EncoderPair {
    /// The target starts as an exact copy of θ.
    pub fn new(encoder: Encoder, theta: ParamStore, tau: f64, mode: BootstrapMode) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(EncoderError::Config(format!("tau = {tau} is outside [0, 1]")));
        }
        let xi = (mode != BootstrapMode::Shared).then(|| theta.clone());
        Ok(Self {
            encoder,
            theta,
            xi,
            tau,
            mode,
        })
    }

    /// Rebuild from explicit stores (checkpoint restore).
    pub fn from_parts(
        encoder: Encoder,
        theta: ParamStore,
        xi: Option<ParamStore>,
        tau: f64,
        mode: BootstrapMode,
    ) -> Result<Self> {
        match (&xi, mode) {
            (None, BootstrapMode::Shared) => {}
            (Some(x), m) if m != BootstrapMode::Shared => {
                if !x.same_layout(&theta) {
                    return Err(EncoderError::Contract("theta and xi layouts differ".into()));
                }
            }
            _ => {
                return Err(EncoderError::Contract(
                    "target weights must be present exactly when not shared".into(),
                ))
            }
        }
        let mut pair = Self::new(encoder, theta, tau, mode)?;
        pair.xi = xi;
        Ok(pair)
    }

    pub fn mode(&self) -> BootstrapMode {
        self.mode
    }

    pub fn theta(&self) -> &ParamStore {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut ParamStore {
        &mut self.theta
    }

    pub fn xi(&self) -> &ParamStore {
        self.xi.as_ref().unwrap_or(&self.theta)
    }

    pub fn xi_mut(&mut self) -> &mut ParamStore {
        self.xi.as_mut().unwrap_or(&mut self.theta)
    }

    /// Whether ξ is a distinct store.
    pub fn has_separate_target(&self) -> bool {
        self.xi.is_some()
    }

    /// The store that receives gradients and optimizer updates.
    pub fn trained(&self) -> &ParamStore {
        match self.mode {
            BootstrapMode::TargetToOnline => self.xi(),
            _ => &self.theta,
        }
    }

    pub fn trained_mut(&mut self) -> &mut ParamStore {
        match self.mode {
            BootstrapMode::TargetToOnline => self.xi_mut(),
            _ => &mut self.theta,
        }
    }

    /// Encode exemplars with θ and contexts with ξ. Only the trained store
    /// is bound as differentiable.
    pub fn encode(&self, tape: &Tape, exemplars: &[Image], contexts: &[Image]) -> Result<Encoded> {
        let (theta, xi) = match self.mode {
            BootstrapMode::Shared => (self.theta.bind(tape, true)?, None),
            BootstrapMode::OnlineToTarget => (self.theta.bind(tape, true)?, Some(self.xi().bind(tape, false)?)),
            BootstrapMode::TargetToOnline => (self.theta.bind(tape, false)?, Some(self.xi().bind(tape, true)?)),
        };
        let h_z = self.encoder.forward(tape, &theta, exemplars, Resolution::Exemplar)?;
        let h_c = self
            .encoder
            .forward(tape, xi.as_ref().unwrap_or(&theta), contexts, Resolution::Context)?;
        Ok(Encoded { h_z, h_c, theta, xi })
    }

    /// Add the tape's gradients into the trained store.
    pub fn accumulate_grads(&mut self, tape: &Tape, enc: &Encoded) {
        match self.mode {
            BootstrapMode::TargetToOnline => {
                let bound = enc.xi.as_ref().expect("separate target binding");
                self.xi_mut().accumulate_grads(tape, bound);
            }
            _ => self.theta.accumulate_grads(tape, &enc.theta),
        }
    }

    /// `target <- tau * target + (1 - tau) * trained`, elementwise over
    /// every parameter, evaluated as `target += (1 - tau) * (trained - target)`
    /// so a target equal to its source stays bitwise unchanged. The target is ξ in online-to-target mode and θ in
    /// target-to-online mode.
    pub fn ema_update(&mut self) -> Result<()> {
        let tau = self.tau;
        let Some(xi) = self.xi.as_mut() else {
            return Err(EncoderError::Contract("ema_update called on a shared encoder".into()));
        };
        let (target, source) = match self.mode {
            BootstrapMode::OnlineToTarget => (xi, &self.theta),
            BootstrapMode::TargetToOnline => (&mut self.theta, &*xi),
            BootstrapMode::Shared => unreachable!("shared mode has no separate target"),
        };
        for (t, s) in target.iter_mut().zip(source.iter()) {
            for (a, &b) in t.value.data_mut().iter_mut().zip(s.value.data()) {
                *a += (1.0 - tau) * (b - *a);
            }
        }
        Ok(())
    }
}
