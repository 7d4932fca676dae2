//! Side-by-side panels of context, ground-truth map and predicted map.

use crate::geometry::{CorrelationMap, Image};

/// Outline color drawn on the context panel.
pub const OUTLINE: [f64; 3] = [1.0, 0.0, 0.0];

/// Gray level in `[0.25, 0.75]` from luma, leaving headroom for tints.
fn base(img: &Image, y: usize, x: usize) -> f64 {
    let l = crate::geometry::image::luma(img.get(0, y, x), img.get(1, y, x), img.get(2, y, x));
    0.25 + 0.5 * l
}

/// Map pixels that are inside but touch an outside pixel or the border.
pub fn outline(map: &CorrelationMap) -> Vec<bool> {
    let m = map.size();
    let inside = |i: isize, j: isize| {
        i >= 0 && j >= 0 && (i as usize) < m && (j as usize) < m && map.get(i as usize, j as usize) > 0.5
    };
    let mut out = vec![false; m * m];
    for i in 0..m as isize {
        for j in 0..m as isize {
            if inside(i, j) && [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)].iter().any(|&(a, b)| !inside(a, b)) {
                out[i as usize * m + j as usize] = true;
            }
        }
    }
    out
}

/// Width-`3m` image: the context with the crop outline; gray context
/// tinted cyan `(g, 1, 1)` where the ground truth is 1; gray context
/// tinted green `(g, g + (1 - g) p, g)` by predicted probability `p`.
///
/// Outside the ground truth the middle panel's green channel is at most
/// 0.75, so quantized green above 191 recovers the map exactly.
pub fn triptych(context: &Image, gt: &CorrelationMap, pred: &CorrelationMap) -> Image {
    let m = context.height();
    assert_eq!(context.width(), m);
    assert_eq!(gt.size(), m);
    assert_eq!(pred.size(), m);
    let edge = outline(gt);
    let mut out = Image::filled(m, 3 * m, [0.0; 3]);
    for y in 0..m {
        for x in 0..m {
            let g = base(context, y, x);
            let c1 = if edge[y * m + x] {
                OUTLINE
            } else {
                [context.get(0, y, x), context.get(1, y, x), context.get(2, y, x)]
            };
            let c2 = if gt.get(y, x) > 0.5 { [g, 1.0, 1.0] } else { [g, g, g] };
            let p = pred.get(y, x);
            let c3 = [g, g + (1.0 - g) * p, g];
            for c in 0..3 {
                out.set(c, y, x, c1[c]);
                out.set(c, y, m + x, c2[c]);
                out.set(c, y, 2 * m + x, c3[c]);
            }
        }
    }
    out
}

/// Recover the binary map from the middle panel of an 8-bit triptych.
pub fn gt_from_panel(img: &Image) -> CorrelationMap {
    let m = img.height();
    let values = (0..m * m)
        .map(|i| {
            let q = super::ppm::quantize(img.get(1, i / m, m + i % m));
            if q > 191 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    CorrelationMap::new(m, values)
}
