//! Synthetic shapes dataset: one to three anti-aliased shapes of a single
//! class over a smooth background. The class is the probe label.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ppm::{self, PpmError};
use crate::geometry::Image;

pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["circle", "square", "triangle"];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub count: usize,
    /// Square image side in pixels.
    pub size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 2000,
            size: 128,
            min_shapes: 1,
            max_shapes: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    /// Class ids, present only for labelled synthetic data.
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// First `n` items and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let part = |r: std::ops::Range<usize>| Dataset {
            images: self.images[r.clone()].to_vec(),
            labels: self.labels.as_ref().map(|l| l[r].to_vec()),
        };
        (part(0..n), part(n..self.len()))
    }

    /// Write `00000.ppm`, `00001.ppm`, ... plus `labels.txt` when labelled.
    pub fn save(&self, dir: &Path) -> Result<(), PpmError> {
        std::fs::create_dir_all(dir).map_err(|e| PpmError::Io(format!("{}: {e}", dir.display())))?;
        for (i, img) in self.images.iter().enumerate() {
            ppm::write_image(&dir.join(format!("{i:05}.ppm")), img)?;
        }
        if let Some(labels) = &self.labels {
            let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
            let p = dir.join("labels.txt");
            std::fs::write(&p, text).map_err(|e| PpmError::Io(format!("{}: {e}", p.display())))?;
        }
        Ok(())
    }

    /// Every `.ppm` file of `dir` in name order, with `labels.txt` if present.
    pub fn load(dir: &Path) -> Result<Dataset, PpmError> {
        let io = |e: std::io::Error| PpmError::Io(format!("{}: {e}", dir.display()));
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
            .collect();
        paths.sort();
        let images = paths.iter().map(|p| ppm::load_image(p)).collect::<Result<Vec<_>, _>>()?;
        let lp = dir.join("labels.txt");
        let labels = if lp.exists() {
            let text = std::fs::read_to_string(&lp).map_err(io)?;
            let labels = text
                .lines()
                .map(|l| l.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| PpmError::Io(format!("{}: {e}", lp.display())))?;
            if labels.len() != images.len() {
                return Err(PpmError::Io(format!(
                    "{}: {} labels for {} images",
                    lp.display(),
                    labels.len(),
                    images.len()
                )));
            }
            Some(labels)
        } else {
            None
        };
        Ok(Dataset { images, labels })
    }
}

/// Signed distance to a shape of the given class, circumradius `r`,
/// rotated by `rot`, centred at the origin.
fn sdf(class: usize, x: f64, y: f64, r: f64, rot: f64) -> f64 {
    let (s, c) = rot.sin_cos();
    let (u, v) = (c * x + s * y, -s * x + c * y);
    match class {
        0 => (u * u + v * v).sqrt() - r,
        1 => {
            let h = r / 2f64.sqrt();
            let (dx, dy) = (u.abs() - h, v.abs() - h);
            let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
            outside + dx.max(dy).min(0.0)
        }
        _ => {
            // equilateral triangle: max distance over the three edge normals
            let inr = r / 2.0;
            (0..3)
                .map(|k| {
                    let a = PI / 2.0 + k as f64 * TAU / 3.0;
                    u * a.cos() + v * a.sin() - inr
                })
                .fold(f64::NEG_INFINITY, f64::max)
        }
    }
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

fn render<R: Rng + ?Sized>(spec: &SyntheticSpec, class: Option<usize>, rng: &mut R) -> Image {
    let s = spec.size as f64;
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let waves: Vec<[Wave; 3]> = (0..3)
        .map(|_| {
            std::array::from_fn(|_| Wave {
                fx: rng.random_range(-3.0..3.0) * TAU / s,
                fy: rng.random_range(-3.0..3.0) * TAU / s,
                phase: rng.random_range(0.0..TAU),
                amp: rng.random_range(0.02..0.08),
            })
        })
        .collect();
    let mut img = Image::from_fn(spec.size, spec.size, |c, y, x| {
        let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
        base[c]
            + waves
                .iter()
                .map(|w| w[c].amp * (w[c].fx * xf + w[c].fy * yf + w[c].phase).sin())
                .sum::<f64>()
    });
    if let Some(class) = class {
        let n = rng.random_range(spec.min_shapes.max(1)..=spec.max_shapes);
        for _ in 0..n {
            let r = rng.random_range(0.1 * s..0.22 * s);
            let cx = rng.random_range(r..s - r);
            let cy = rng.random_range(r..s - r);
            let rot = rng.random_range(0.0..TAU);
            let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let (x0, x1) = ((cx - r - 1.0).max(0.0) as usize, ((cx + r + 2.0) as usize).min(spec.size));
            let (y0, y1) = ((cy - r - 1.0).max(0.0) as usize, ((cy + r + 2.0) as usize).min(spec.size));
            for y in y0..y1 {
                for x in x0..x1 {
                    let d = sdf(class, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r, rot);
                    let cover = (0.5 - d).clamp(0.0, 1.0);
                    if cover > 0.0 {
                        for (c, &col) in color.iter().enumerate() {
                            let v = img.get(c, y, x);
                            img.set(c, y, x, v + cover * (col - v));
                        }
                    }
                }
            }
        }
    }
    img.clamp01();
    img
}

/// Deterministic in `(spec, seed)`. Each image's class is uniform over the
/// three shapes; with `max_shapes == 0` images are background only and
/// unlabelled.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labelled = spec.max_shapes > 0;
    let mut images = Vec::with_capacity(spec.count);
    let mut labels = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let class = labelled.then(|| rng.random_range(0..NUM_CLASSES));
        images.push(render(spec, class, &mut rng));
        labels.extend(class);
    }
    Dataset {
        images,
        labels: labelled.then_some(labels),
    }
}

impl SyntheticSpec {
    pub fn validate(&self, min_size: usize) -> Result<(), String> {
        if self.size < min_size {
            return Err(format!("synthetic image size {} is below {min_size}", self.size));
        }
        if self.min_shapes > self.max_shapes || self.max_shapes > 3 {
            return Err(format!(
                "shape counts must satisfy min <= max <= 3, got {}..{}",
                self.min_shapes, self.max_shapes
            ));
        }
        if self.max_shapes > 0 && self.min_shapes == 0 {
            return Err("labelled images need at least one shape".into());
        }
        Ok(())
    }
}
