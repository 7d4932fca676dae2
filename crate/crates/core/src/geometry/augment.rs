//! Photometric and flip transformations applied to exemplars.

use rand::Rng;

use super::image::{luma, Image, CHANNELS};
use super::GeometryError;

/// Per-transform application probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_p: f64,
    pub jitter_p: f64,
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub solarize_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_p: 0.5,
            jitter_p: 0.8,
            grayscale_p: 0.2,
            blur_p: 0.5,
            solarize_p: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip_p: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            solarize_p: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        for (name, p) in [
            ("flip_p", self.flip_p),
            ("jitter_p", self.jitter_p),
            ("grayscale_p", self.grayscale_p),
            ("blur_p", self.blur_p),
            ("solarize_p", self.solarize_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(GeometryError::Config(format!("augment.{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }
}

pub const JITTER_RANGE: (f64, f64) = (0.6, 1.4);
pub const BLUR_SIGMA_RANGE: (f64, f64) = (0.1, 2.0);
pub const SOLARIZE_THRESHOLD: f64 = 0.5;

fn coin<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    // always draw, so the stream position does not depend on p
    let u: f64 = rng.random();
    u < p
}

/// Apply flip, color jitter, grayscale, blur and solarize, each
/// independently with its configured probability. Output is clamped to
/// `[0, 1]`.
pub fn augment_exemplar<R: Rng + ?Sized>(z: &Image, cfg: &AugmentConfig, rng: &mut R) -> Image {
    let mut img = z.clone();
    if coin(rng, cfg.flip_p) {
        img = hflip(&img);
    }
    if coin(rng, cfg.jitter_p) {
        let b = rng.random_range(JITTER_RANGE.0..JITTER_RANGE.1);
        let c = rng.random_range(JITTER_RANGE.0..JITTER_RANGE.1);
        let s = rng.random_range(JITTER_RANGE.0..JITTER_RANGE.1);
        img = color_jitter(&img, b, c, s);
    }
    if coin(rng, cfg.grayscale_p) {
        img = grayscale(&img);
    }
    if coin(rng, cfg.blur_p) {
        let sigma = rng.random_range(BLUR_SIGMA_RANGE.0..BLUR_SIGMA_RANGE.1);
        img = gaussian_blur(&img, sigma);
    }
    if coin(rng, cfg.solarize_p) {
        img = solarize(&img, SOLARIZE_THRESHOLD);
    }
    img.clamp01();
    img
}

pub fn hflip(img: &Image) -> Image {
    let w = img.width();
    Image::from_fn(img.height(), w, |c, y, x| img.get(c, y, w - 1 - x))
}

fn gray_plane(img: &Image) -> Vec<f64> {
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    (0..r.len()).map(|i| luma(r[i], g[i], b[i])).collect()
}

pub fn grayscale(img: &Image) -> Image {
    let l = gray_plane(img);
    let w = img.width();
    Image::from_fn(img.height(), w, |_, y, x| l[y * w + x])
}

/// Brightness, then contrast around the mean luma, then saturation around
/// per-pixel luma; clamped after each stage.
pub fn color_jitter(img: &Image, brightness: f64, contrast: f64, saturation: f64) -> Image {
    let mut out = img.map(|v| (v * brightness).clamp(0.0, 1.0));
    let gray = gray_plane(&out);
    let mean = gray.iter().sum::<f64>() / gray.len() as f64;
    for v in out.pixels_mut() {
        *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
    }
    let gray = gray_plane(&out);
    for c in 0..CHANNELS {
        for (v, g) in out.plane_mut(c).iter_mut().zip(&gray) {
            *v = ((*v - g) * saturation + g).clamp(0.0, 1.0);
        }
    }
    out
}

pub fn solarize(img: &Image, threshold: f64) -> Image {
    img.map(|v| if v >= threshold { 1.0 - v } else { v })
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable Gaussian blur with radius `ceil(3 sigma)` and reflect padding.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    for c in 0..CHANNELS {
        let src = img.plane(c);
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * src[y * w + reflect(x as isize + j as isize - r, w)])
                    .sum();
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * tmp[reflect(y as isize + j as isize - r, h) * w + x])
                    .sum();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..3 * h * w).map(|_| rng.random::<f64>()).collect();
        Image::from_planar(h, w, px)
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let z = noise(16, 16, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment_exemplar(&z, &AugmentConfig::none(), &mut rng), z);
    }

    #[test]
    fn flip_is_an_involution() {
        let z = noise(8, 11, 2);
        assert_eq!(hflip(&hflip(&z)), z);
    }

    #[test]
    fn grayscale_fixed_point() {
        let g = Image::from_fn(10, 10, |_, y, x| ((y * 10 + x) as f64) / 100.0);
        let out = grayscale(&g);
        for (a, b) in out.pixels().iter().zip(g.pixels()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_preserves_constants_and_kernel_is_normalized() {
        let c = Image::filled(12, 12, [0.3, 0.6, 0.9]);
        let b = gaussian_blur(&c, 1.7);
        for (a, b) in b.pixels().iter().zip(c.pixels()) {
            assert!((a - b).abs() < 1e-12);
        }
        let k = gaussian_kernel(0.8);
        assert_eq!(k.len(), 2 * 3 + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn reflect_padding_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-3, 5), 3);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(-7, 3), 1);
    }

    #[test]
    fn solarize_inverts_bright_pixels() {
        let img = Image::from_planar(1, 2, vec![0.2, 0.7, 0.5, 0.1, 0.9, 0.49]);
        let s = solarize(&img, 0.5);
        let expect = [0.2, 0.30000000000000004, 0.5, 0.1, 0.09999999999999998, 0.49];
        assert_eq!(s.pixels(), &expect);
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let all = AugmentConfig {
            flip_p: 1.0,
            jitter_p: 1.0,
            grayscale_p: 0.5,
            blur_p: 1.0,
            solarize_p: 0.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for s in 0..50 {
            let out = augment_exemplar(&noise(12, 12, s), &all, &mut rng);
            assert!(out.in_unit_range());
        }
    }

    #[test]
    fn bad_probability_rejected() {
        let cfg = AugmentConfig {
            blur_p: 1.5,
            ..AugmentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
