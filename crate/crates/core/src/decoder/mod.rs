//! Correlation decoders: map exemplar and context features to a per-pixel
//! correlation logit over the context.
//!
//! The cross-attention path runs, per layer,
//! `u = f_c(r)`, `q = u + PE`, `k = f_k(h_z)`, `v = f_v(h_z)`,
//! `a = MHA(q, k, v)`, `r' = u + a + MLP(LN(u + a))`, starting from
//! `r = h_c`, then predicts one logit per context token and upsamples to
//! `m x m`. The convolution path instead slides each exemplar's feature
//! grid over the context's feature grid.
//!
//! Contexts are batched on axis 0 and exemplars on axis 1, so a batch of
//! `B` contexts with `K` exemplars each produces logits `[B, K, m, m]`.

use rand::Rng;
use thiserror::Error;

use crate::nn::{self, Init, LayerNorm, Linear, Mlp, INIT_STD};
use crate::tensor::kernels::Pad2d;
use crate::tensor::{Bound, ParamId, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecoderError {
    #[error("decoder config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DecoderError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Predictor {
    Linear,
    /// Three stride-2 transposed convolutions.
    DeepDeconv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorrelationOp {
    CrossAttention,
    Convolution,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub predictor: Predictor,
    pub correlation_op: CorrelationOp,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            depth: 1,
            mlp_ratio: 4,
            predictor: Predictor::Linear,
            correlation_op: CorrelationOp::CrossAttention,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.correlation_op == CorrelationOp::Convolution {
            return Ok(());
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(DecoderError::Config(format!(
                "decoder width {} is not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.width == 0 || !self.width.is_multiple_of(4) {
            return Err(DecoderError::Config(format!(
                "decoder width {} must be a positive multiple of 4",
                self.width
            )));
        }
        if self.depth == 0 {
            return Err(DecoderError::Config("decoder depth must be at least 1".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(DecoderError::Config("decoder mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Fixed 2-D sine/cosine table `[g*g, d]` over a `g x g` grid in row-major
/// order. The first half of the channels encode the row, the second half
/// the column; each half is `[sin(pos w_i), cos(pos w_i)]` with
/// `w_i = 10000^(-i / (d/4))`.
pub fn sincos_2d(g: usize, d: usize) -> Tensor {
    let quarter = d / 4;
    let mut data = Vec::with_capacity(g * g * d);
    for row in 0..g {
        for col in 0..g {
            for pos in [row as f64, col as f64] {
                let (sins, coss): (Vec<f64>, Vec<f64>) = (0..quarter)
                    .map(|i| {
                        let w = 10000f64.powf(-(i as f64) / quarter as f64);
                        ((pos * w).sin(), (pos * w).cos())
                    })
                    .unzip();
                data.extend(sins);
                data.extend(coss);
            }
        }
    }
    Tensor::new(&[g * g, d], data).expect("grid and width are positive")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub f_c: Linear,
    pub f_k: Linear,
    pub f_v: Linear,
    pub proj: Linear,
    pub ln: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
enum Head {
    Linear(Linear),
    Deconv(Vec<(ParamId, ParamId)>),
}

#[derive(Clone, Debug, PartialEq)]
enum Body {
    Attention { layers: Vec<Layer>, pe: Tensor, head: Head },
    Convolution { bias: ParamId },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    cfg: DecoderConfig,
    enc_dim: usize,
    /// Context token grid side.
    grid: usize,
    /// Output map side.
    m: usize,
    body: Body,
}

impl Decoder {
    /// Layout and fresh weights for encoder features of width `enc_dim`
    /// over a `grid x grid` context token grid, predicting `m x m` maps.
    pub fn init<R: Rng + ?Sized>(
        cfg: &DecoderConfig,
        enc_dim: usize,
        grid: usize,
        m: usize,
        rng: &mut R,
    ) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        if grid == 0 || m < grid {
            return Err(DecoderError::Config(format!("map size {m} is smaller than token grid {grid}")));
        }
        let mut store = ParamStore::new();
        let d = cfg.width;
        let std = Init::TruncNormal(INIT_STD);
        let body = match cfg.correlation_op {
            CorrelationOp::Convolution => Body::Convolution {
                bias: store.add("correlate.bias", Tensor::zeros(&[1]), false),
            },
            CorrelationOp::CrossAttention => {
                let layers = (0..cfg.depth)
                    .map(|l| {
                        let name = format!("layers.{l}");
                        let s = &mut store;
                        let in_dim = if l == 0 { enc_dim } else { d };
                        Layer {
                            f_c: Linear::new(s, &format!("{name}.f_c"), in_dim, d, true, std, rng),
                            f_k: Linear::new(s, &format!("{name}.f_k"), enc_dim, d, true, std, rng),
                            f_v: Linear::new(s, &format!("{name}.f_v"), enc_dim, d, true, std, rng),
                            proj: Linear::new(s, &format!("{name}.proj"), d, d, true, std, rng),
                            ln: LayerNorm::new(s, &format!("{name}.norm"), d),
                            mlp: Mlp::new(s, &format!("{name}.mlp"), d, d * cfg.mlp_ratio, rng),
                        }
                    })
                    .collect();
                let head = match cfg.predictor {
                    Predictor::Linear => Head::Linear(Linear::new(&mut store, "predictor", d, 1, true, std, rng)),
                    Predictor::DeepDeconv => {
                        if 8 * grid > m {
                            return Err(DecoderError::Config(format!(
                                "deconv predictor outputs {} pixels, more than map size {m}",
                                8 * grid
                            )));
                        }
                        let chans = [d, d / 2, d / 4, 1];
                        let stages = (0..3)
                            .map(|i| {
                                let (cin, cout) = (chans[i], chans[i + 1]);
                                let w = nn::normal(&[cin, cout, 2, 2], (2.0 / cin as f64).sqrt(), rng);
                                let k = store.add(format!("predictor.deconv{i}.weight"), w, true);
                                let b = store.add(format!("predictor.deconv{i}.bias"), Tensor::zeros(&[cout]), false);
                                (k, b)
                            })
                            .collect();
                        Head::Deconv(stages)
                    }
                };
                Body::Attention {
                    layers,
                    pe: sincos_2d(grid, d),
                    head,
                }
            }
        };
        Ok((
            Self {
                cfg: cfg.clone(),
                enc_dim,
                grid,
                m,
                body,
            },
            store,
        ))
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[Layer] {
        match &self.body {
            Body::Attention { layers, .. } => layers,
            Body::Convolution { .. } => &[],
        }
    }

    /// The fixed query position table (attention path only).
    pub fn pe(&self) -> Option<&Tensor> {
        match &self.body {
            Body::Attention { pe, .. } => Some(pe),
            Body::Convolution { .. } => None,
        }
    }

    fn check_features(&self, tape: &Tape, h_z: Var, h_c: Var, k: usize) -> Result<(usize, usize)> {
        let zs = tape.shape(h_z);
        let cs = tape.shape(h_c);
        if zs.len() != 3 || cs.len() != 3 {
            return Err(DecoderError::Config(format!(
                "features must be rank 3, got {zs:?} and {cs:?}"
            )));
        }
        let b = cs[0];
        if k == 0 || zs[0] != b * k {
            return Err(DecoderError::Config(format!(
                "{} exemplar feature sets do not split into {b} contexts x {k}",
                zs[0]
            )));
        }
        if zs[2] != self.enc_dim || cs[2] != self.enc_dim {
            return Err(DecoderError::Config(format!(
                "encoder width {} expected, got {} and {}",
                self.enc_dim, zs[2], cs[2]
            )));
        }
        if cs[1] != self.grid * self.grid {
            return Err(DecoderError::Config(format!(
                "context has {} tokens, expected {}",
                cs[1],
                self.grid * self.grid
            )));
        }
        Ok((b, zs[1]))
    }

    /// `q = f_c(r) + PE`, `k = f_k(h_z)`, `v = f_v(h_z)` for one layer.
    /// Also returns `u = f_c(r)`, the residual stream the fusion adds to.
    pub fn project_qkv(&self, tape: &Tape, p: &Bound, layer: &Layer, r: Var, h_z: Var) -> Result<[Var; 4]> {
        let pe = self
            .pe()
            .ok_or_else(|| DecoderError::Config("convolution decoder has no projections".into()))?;
        let u = layer.f_c.forward(tape, p, r)?;
        let pe = tape.constant(pe.clone())?;
        let q = tape.add(u, pe)?;
        let k = layer.f_k.forward(tape, p, h_z)?;
        let v = layer.f_v.forward(tape, p, h_z)?;
        Ok([u, q, k, v])
    }

    /// Multi-head attention of context queries over exemplar keys, followed
    /// by the output projection.
    pub fn cross_attention(&self, tape: &Tape, p: &Bound, layer: &Layer, q: Var, k: Var, v: Var) -> Result<Var> {
        let a = nn::attention(tape, q, k, v, self.cfg.heads)?;
        Ok(layer.proj.forward(tape, p, a)?)
    }

    /// `x + a + MLP(LN(x + a))`.
    pub fn fuse(&self, tape: &Tape, p: &Bound, layer: &Layer, x: Var, a: Var) -> Result<Var> {
        let s = tape.add(x, a)?;
        let h = layer.ln.forward(tape, p, s)?;
        let h = layer.mlp.forward(tape, p, h)?;
        Ok(tape.add(s, h)?)
    }

    /// One logit per token, laid out on the token grid and upsampled:
    /// `[.., g*g, d] -> [.., m, m]`.
    pub fn predict_map(&self, tape: &Tape, p: &Bound, h: Var) -> Result<Var> {
        let Body::Attention { head, .. } = &self.body else {
            return Err(DecoderError::Config("convolution decoder has no predictor".into()));
        };
        let shape = tape.shape(h);
        let r = shape.len();
        let g = self.grid;
        if r < 2 || shape[r - 2] != g * g {
            return Err(TensorError::Dimension {
                op: "predict_map",
                detail: format!("expected {} tokens, got shape {shape:?}", g * g),
            }
            .into());
        }
        let lead: Vec<usize> = shape[..r - 2].to_vec();
        let n: usize = lead.iter().product();
        let d = shape[r - 1];
        let maps = match head {
            Head::Linear(fp) => {
                let y = fp.forward(tape, p, h)?;
                let y = tape.reshape(y, &[n, g, g])?;
                tape.upsample_bilinear(y, self.m, self.m)?
            }
            Head::Deconv(stages) => {
                let x = tape.reshape(h, &[n, g, g, d])?;
                let mut x = tape.permute(x, &[0, 3, 1, 2])?;
                for (i, &(k, b)) in stages.iter().enumerate() {
                    x = tape.conv_transpose2d(x, p[k], Some(p[b]), 2)?;
                    if i + 1 < stages.len() {
                        x = tape.gelu(x)?;
                    }
                }
                let x = tape.reshape(x, &[n, 8 * g, 8 * g])?;
                if 8 * g < self.m {
                    tape.upsample_bilinear(x, self.m, self.m)?
                } else {
                    x
                }
            }
        };
        let mut out = lead;
        out.extend([self.m, self.m]);
        Ok(tape.reshape(maps, &out)?)
    }

    /// Slide each exemplar's `gz x gz` feature grid over its context's
    /// `gc x gc` grid (same padding, no kernel flip), add the scalar bias,
    /// and upsample. Features are `h_z: [B*K, gz*gz, D]`, `h_c: [B, gc*gc, D]`.
    pub fn conv_correlate(&self, tape: &Tape, p: &Bound, h_z: Var, h_c: Var, k: usize) -> Result<Var> {
        let Body::Convolution { bias } = &self.body else {
            return Err(DecoderError::Config("attention decoder has no correlation bias".into()));
        };
        let (b, tz) = self.check_features(tape, h_z, h_c, k)?;
        let gz = (tz as f64).sqrt().round() as usize;
        let gc = self.grid;
        let d = self.enc_dim;
        if gz * gz != tz {
            return Err(DecoderError::Config(format!("{tz} exemplar tokens do not form a square grid")));
        }
        if gz > gc {
            return Err(TensorError::Dimension {
                op: "conv_correlate",
                detail: format!("exemplar grid {gz} exceeds context grid {gc}"),
            }
            .into());
        }
        let mut per_context = Vec::with_capacity(b);
        for i in 0..b {
            let z = tape.narrow(h_z, 0, i * k, k)?;
            let z = tape.reshape(z, &[k, gz, gz, d])?;
            let kernel = tape.permute(z, &[0, 3, 1, 2])?;
            let c = tape.narrow(h_c, 0, i, 1)?;
            let c = tape.reshape(c, &[gc, gc, d])?;
            let c = tape.permute(c, &[2, 0, 1])?;
            per_context.push(tape.conv2d_padded(c, kernel, None, 1, Pad2d::same(gz, gz))?);
        }
        let y = tape.concat(&per_context, 0)?;
        let y = tape.add(y, p[*bias])?;
        let y = tape.upsample_bilinear(y, self.m, self.m)?;
        Ok(tape.reshape(y, &[b, k, self.m, self.m])?)
    }

    /// Full decoder: logits `[B, K, m, m]` for `h_z: [B*K, Tz, D]` and
    /// `h_c: [B, Tc, D]`.
    pub fn forward(&self, tape: &Tape, p: &Bound, h_z: Var, h_c: Var, k: usize) -> Result<Var> {
        let (b, tz) = self.check_features(tape, h_z, h_c, k)?;
        if let Body::Convolution { .. } = self.body {
            return self.conv_correlate(tape, p, h_z, h_c, k);
        }
        let z = tape.reshape(h_z, &[b, k, tz, self.enc_dim])?;
        let mut r = tape.reshape(h_c, &[b, 1, self.grid * self.grid, self.enc_dim])?;
        for layer in self.layers() {
            let [u, q, kk, v] = self.project_qkv(tape, p, layer, r, z)?;
            let a = self.cross_attention(tape, p, layer, q, kk, v)?;
            r = self.fuse(tape, p, layer, u, a)?;
        }
        self.predict_map(tape, p, r)
    }
}

#[cfg(test)]
mod tests;
