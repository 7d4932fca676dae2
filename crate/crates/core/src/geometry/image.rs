use crate::tensor::Tensor;

/// Three-channel planar (CHW) image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

pub const CHANNELS: usize = 3;

impl Image {
    /// Build from planar CHW data. Panics if the length is wrong.
    pub fn from_planar(height: usize, width: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), CHANNELS * height * width, "planar image size mismatch");
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(CHANNELS * height * width);
        for v in rgb {
            pixels.extend(std::iter::repeat_n(v, height * width));
        }
        Self::from_planar(height, width, pixels)
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    pixels.push(f(c, y, x));
                }
            }
        }
        Self::from_planar(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.pixels[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.pixels[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.pixels[(c * self.height + y) * self.width + x] = v;
    }

    /// Bilinear sample at continuous index coordinates (pixel `i` has its
    /// center at `i`), clamped to the border.
    pub fn sample(&self, c: usize, y: f64, x: f64) -> f64 {
        let plane = self.plane(c);
        let (y0, y1, fy) = axis_tap(y, self.height);
        let (x0, x1, fx) = axis_tap(x, self.width);
        let w = self.width;
        let top = plane[y0 * w + x0] + (plane[y0 * w + x1] - plane[y0 * w + x0]) * fx;
        let bot = plane[y1 * w + x0] + (plane[y1 * w + x1] - plane[y1 * w + x0]) * fx;
        top + (bot - top) * fy
    }

    /// Resample the axis-aligned box with top-left `(x0, y0)` (pixel-edge
    /// coordinates) and size `w x h` to `out_h x out_w`, half-pixel aligned.
    pub fn resize_region(&self, x0: f64, y0: f64, w: f64, h: f64, out_h: usize, out_w: usize) -> Image {
        let sy = h / out_h as f64;
        let sx = w / out_w as f64;
        Image::from_fn(out_h, out_w, |c, v, u| {
            let y = y0 + (v as f64 + 0.5) * sy - 0.5;
            let x = x0 + (u as f64 + 0.5) * sx - 0.5;
            self.sample(c, y, x)
        })
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        self.resize_region(0.0, 0.0, self.width as f64, self.height as f64, out_h, out_w)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.pixels {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// `[3, H, W]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[CHANNELS, self.height, self.width], self.pixels.clone())
            .expect("image dimensions are positive")
    }

    /// Non-overlapping `p x p` patches flattened in (channel, row, column)
    /// order, one row per patch in row-major patch order: `[(H/p)(W/p), 3p^2]`.
    pub fn to_patches(&self, p: usize) -> Vec<f64> {
        let (gh, gw) = (self.height / p, self.width / p);
        let mut out = Vec::with_capacity(gh * gw * CHANNELS * p * p);
        for py in 0..gh {
            for px in 0..gw {
                for c in 0..CHANNELS {
                    let plane = self.plane(c);
                    for y in 0..p {
                        let row = (py * p + y) * self.width + px * p;
                        out.extend_from_slice(&plane[row..row + p]);
                    }
                }
            }
        }
        out
    }
}

fn axis_tap(s: f64, len: usize) -> (usize, usize, f64) {
    let s = s.clamp(0.0, (len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, s - i0 as f64)
}

/// Rec. 601 luma.
pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

