//! Exemplar-context pair generation.
//!
//! A context is a random resized crop of the source image. Exemplars are
//! rotated rectangles inside the context, described by [`CropParams`]:
//! area ratio `r0`, height/width ratio `r1`, rotation `alpha` (degrees) and
//! center. For a context of side `m` the rectangle has width
//! `m * sqrt(r0 / r1)` and height `m * sqrt(r0 * r1)`. A local point
//! `(lx, ly)` maps to context coordinates
//! `(cx + lx cos a - ly sin a, cy + lx sin a + ly cos a)`, with x to the
//! right and y down, both measured in pixel edges (pixel `(i, j)` covers
//! `[j, j+1] x [i, i+1]`).

pub mod augment;
pub mod image;

pub use augment::{augment_exemplar, AugmentConfig};
pub use image::Image;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("geometry config error: {0}")]
    Config(String),
    #[error("crop {params:?} is not contained in the {m}x{m} context")]
    Containment { params: CropParams, m: usize },
}

type Result<T> = std::result::Result<T, GeometryError>;

/// Relative slack for containment checks; keeps exact-fit crops (r0 = 1) legal.
const CONTAIN_EPS: f64 = 1e-9;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 100;

/// Geometry of one exemplar relative to its context.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropParams {
    pub r0: f64,
    pub r1: f64,
    /// Degrees.
    pub alpha: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CropParams {
    /// `(width, height)` in context pixels.
    pub fn size(&self, m: usize) -> (f64, f64) {
        let m = m as f64;
        (m * (self.r0 / self.r1).sqrt(), m * (self.r0 * self.r1).sqrt())
    }

    fn sin_cos(&self) -> (f64, f64) {
        self.alpha.to_radians().sin_cos()
    }

    /// Local rectangle coordinates to context coordinates.
    pub fn to_context(&self, lx: f64, ly: f64) -> (f64, f64) {
        let (s, c) = self.sin_cos();
        (self.cx + lx * c - ly * s, self.cy + lx * s + ly * c)
    }

    /// Corners in order top-left, top-right, bottom-right, bottom-left
    /// (in the rectangle's own frame).
    pub fn corners(&self, m: usize) -> [(f64, f64); 4] {
        let (w, h) = self.size(m);
        let (hw, hh) = (w / 2.0, h / 2.0);
        [
            self.to_context(-hw, -hh),
            self.to_context(hw, -hh),
            self.to_context(hw, hh),
            self.to_context(-hw, hh),
        ]
    }

    pub fn contained_in(&self, m: usize) -> bool {
        let tol = CONTAIN_EPS * m as f64;
        let hi = m as f64 + tol;
        self.corners(m)
            .iter()
            .all(|&(x, y)| x >= -tol && y >= -tol && x <= hi && y <= hi)
    }

    /// Closed-rectangle membership of a context point.
    pub fn contains_point(&self, m: usize, x: f64, y: f64) -> bool {
        let (w, h) = self.size(m);
        let (s, c) = self.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let lx = dx * c + dy * s;
        let ly = -dx * s + dy * c;
        lx.abs() <= w / 2.0 && ly.abs() <= h / 2.0
    }
}

/// Sampling ranges for crop parameters. Degenerate ranges (min == max) fix
/// the value.
#[derive(Clone, Debug, PartialEq)]
pub struct CropConfig {
    pub r0_min: f64,
    pub r0_max: f64,
    pub r1_min: f64,
    pub r1_max: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            r0_min: 0.0,
            r0_max: 1.0,
            r1_min: 1.0 / 3.0,
            r1_max: 3.0,
            alpha_min: -45.0,
            alpha_max: 45.0,
        }
    }
}

impl CropConfig {
    /// Square, unrotated crops of one fixed area ratio.
    pub fn fixed(r0: f64) -> Self {
        Self {
            r0_min: r0,
            r0_max: r0,
            r1_min: 1.0,
            r1_max: 1.0,
            alpha_min: 0.0,
            alpha_max: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GeometryError::Config(msg));
        if self.r0_max > 1.0 {
            return bad(format!("crop.r0_max = {} exceeds 1", self.r0_max));
        }
        if !(self.r0_min >= 0.0 && self.r0_min <= self.r0_max && self.r0_max > 0.0) {
            return bad(format!("crop r0 range [{}, {}] is empty", self.r0_min, self.r0_max));
        }
        if !(self.r1_min > 0.0 && self.r1_min <= self.r1_max) {
            return bad(format!("crop r1 range [{}, {}] is invalid", self.r1_min, self.r1_max));
        }
        if self.alpha_min > self.alpha_max || !self.alpha_min.is_finite() || !self.alpha_max.is_finite() {
            return bad(format!(
                "crop alpha range [{}, {}] is invalid",
                self.alpha_min, self.alpha_max
            ));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Sample crop parameters: `r0` uniform, `r1` log-uniform, `alpha`
/// uniform, then the center uniform over the context, accepted only when
/// the rotated rectangle is fully contained. After
/// [`MAX_PLACEMENT_ATTEMPTS`] rejections the crop falls back to
/// `alpha = 0` at the context center, with `r1` clamped into `[r0, 1/r0]`
/// so the unrotated rectangle fits.
pub fn sample_crop_params<R: Rng + ?Sized>(m: usize, cfg: &CropConfig, rng: &mut R) -> Result<CropParams> {
    cfg.validate()?;
    if m < 16 {
        return Err(GeometryError::Config(format!("context size {m} is below 16")));
    }
    let mut r0 = uniform(rng, cfg.r0_min, cfg.r0_max);
    while r0 <= 0.0 {
        r0 = uniform(rng, cfg.r0_min, cfg.r0_max);
    }
    let r1 = uniform(rng, cfg.r1_min.ln(), cfg.r1_max.ln()).exp();
    let alpha = uniform(rng, cfg.alpha_min, cfg.alpha_max);
    let mf = m as f64;
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let p = CropParams {
            r0,
            r1,
            alpha,
            cx: rng.random_range(0.0..mf),
            cy: rng.random_range(0.0..mf),
        };
        if p.contained_in(m) {
            return Ok(p);
        }
    }
    Ok(CropParams {
        r0,
        r1: r1.clamp(r0, 1.0 / r0),
        alpha: 0.0,
        cx: mf / 2.0,
        cy: mf / 2.0,
    })
}

/// Axis-aligned integer crop box in source-image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContextCrop {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

pub const CONTEXT_AREA_RANGE: (f64, f64) = (0.2, 1.0);
pub const CONTEXT_ASPECT_RANGE: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);

/// Random resized-crop box: area fraction uniform in [0.2, 1], aspect
/// log-uniform in [3/4, 4/3]; ten tries, then a centered crop of the whole
/// image with its aspect clamped into range.
pub fn sample_context_crop<R: Rng + ?Sized>(width: usize, height: usize, rng: &mut R) -> ContextCrop {
    let area = (width * height) as f64;
    let (la, lb) = (CONTEXT_ASPECT_RANGE.0.ln(), CONTEXT_ASPECT_RANGE.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(CONTEXT_AREA_RANGE.0..=CONTEXT_AREA_RANGE.1);
        let aspect = rng.random_range(la..=lb).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let y0 = rng.random_range(0..=height - h);
            let x0 = rng.random_range(0..=width - w);
            return ContextCrop { x0, y0, w, h };
        }
    }
    let ratio = width as f64 / height as f64;
    let (w, h) = if ratio < CONTEXT_ASPECT_RANGE.0 {
        (width, ((width as f64 / CONTEXT_ASPECT_RANGE.0).round() as usize).min(height))
    } else if ratio > CONTEXT_ASPECT_RANGE.1 {
        (((height as f64 * CONTEXT_ASPECT_RANGE.1).round() as usize).min(width), height)
    } else {
        (width, height)
    };
    ContextCrop {
        x0: (width - w) / 2,
        y0: (height - h) / 2,
        w,
        h,
    }
}

pub fn crop_and_resize(x: &Image, crop: ContextCrop, m: usize) -> Image {
    x.resize_region(crop.x0 as f64, crop.y0 as f64, crop.w as f64, crop.h as f64, m, m)
}

/// Square `m x m` context from a random resized crop of `x`.
pub fn make_context<R: Rng + ?Sized>(x: &Image, m: usize, rng: &mut R) -> Image {
    let crop = sample_context_crop(x.width(), x.height(), rng);
    crop_and_resize(x, crop, m)
}

/// Sample the rotated crop `p` out of context `c` into an `n x n` exemplar.
///
/// Destination pixel `(v, u)` has local coordinates
/// `((u + 0.5)/n - 0.5) * w`, `((v + 0.5)/n - 0.5) * h`, is rotated and
/// translated into the context, and sampled bilinearly.
pub fn extract_exemplar(c: &Image, p: &CropParams, n: usize) -> Result<Image> {
    let m = c.width();
    if c.height() != m {
        return Err(GeometryError::Config(format!(
            "context must be square, got {}x{}",
            c.height(),
            m
        )));
    }
    if !p.contained_in(m) {
        return Err(GeometryError::Containment { params: *p, m });
    }
    let (w, h) = p.size(m);
    let nf = n as f64;
    let mut coords = Vec::with_capacity(n * n);
    for v in 0..n {
        let ly = ((v as f64 + 0.5) / nf - 0.5) * h;
        for u in 0..n {
            let lx = ((u as f64 + 0.5) / nf - 0.5) * w;
            coords.push(p.to_context(lx, ly));
        }
    }
    Ok(Image::from_fn(n, n, |ch, v, u| {
        let (x, y) = coords[v * n + u];
        c.sample(ch, y - 0.5, x - 0.5)
    }))
}

/// `m x m` grid of values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMap {
    size: usize,
    values: Vec<f64>,
}

impl CorrelationMap {
    pub fn new(size: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), size * size, "correlation map size mismatch");
        Self { size, values }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn ones(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.5).count()
    }
}

/// Ground-truth map: pixel `(i, j)` is 1 iff its center `(j + 0.5, i + 0.5)`
/// lies in the closed rotated rectangle.
pub fn rasterize_correlation(p: &CropParams, m: usize) -> CorrelationMap {
    let mut values = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            let inside = p.contains_point(m, j as f64 + 0.5, i as f64 + 0.5);
            values.push(if inside { 1.0 } else { 0.0 });
        }
    }
    CorrelationMap::new(m, values)
}

/// Everything needed to generate one exemplar-context training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchConfig {
    /// Context side.
    pub m: usize,
    /// Exemplar side.
    pub n: usize,
    /// Exemplars per context.
    pub k: usize,
    pub crop: CropConfig,
    pub augment: AugmentConfig,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            m: 64,
            n: 32,
            k: 2,
            crop: CropConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl BatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 16 {
            return Err(GeometryError::Config(format!("context size {} is below 16", self.m)));
        }
        if self.n < 8 {
            return Err(GeometryError::Config(format!("exemplar size {} is below 8", self.n)));
        }
        if self.k == 0 {
            return Err(GeometryError::Config("need at least one exemplar per context".into()));
        }
        self.crop.validate()?;
        self.augment.validate()
    }
}

/// One context, its exemplars, and their ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ExemplarContextBatch {
    pub context: Image,
    pub exemplars: Vec<Image>,
    pub maps: Vec<CorrelationMap>,
    pub params: Vec<CropParams>,
}

/// Total tokens seen by a patch-`p` encoder for one context and `k` exemplars.
pub fn token_count(m: usize, n: usize, p: usize, k: usize) -> usize {
    (m / p).pow(2) + k * (n / p).pow(2)
}

/// Build a context and `k` augmented exemplars with their maps. Maps are
/// rasterized from the crop geometry, so exemplar augmentation never moves
/// the ground truth.
pub fn build_batch<R: Rng + ?Sized>(x: &Image, cfg: &BatchConfig, rng: &mut R) -> Result<ExemplarContextBatch> {
    cfg.validate()?;
    if x.width() < 2 || x.height() < 2 {
        return Err(GeometryError::Config("source image must be at least 2x2".into()));
    }
    let context = make_context(x, cfg.m, rng);
    let mut batch = ExemplarContextBatch {
        context,
        exemplars: Vec::with_capacity(cfg.k),
        maps: Vec::with_capacity(cfg.k),
        params: Vec::with_capacity(cfg.k),
    };
    for _ in 0..cfg.k {
        let p = sample_crop_params(cfg.m, &cfg.crop, rng)?;
        let z = extract_exemplar(&batch.context, &p, cfg.n)?;
        batch.exemplars.push(augment_exemplar(&z, &cfg.augment, rng));
        batch.maps.push(rasterize_correlation(&p, cfg.m));
        batch.params.push(p);
    }
    Ok(batch)
}
