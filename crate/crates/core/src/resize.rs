//! Separable triangle-filter resampling with half-pixel centers.
//!
//! On upscaling this is plain bilinear interpolation (corners not aligned,
//! edge samples clamped). On downscaling the filter support widens with the
//! scale factor, which anti-aliases.

use ndarray::{Array2, Array3, ArrayView2, Axis};

struct Taps {
    start: usize,
    weights: Vec<f64>,
}

fn triangle(x: f64) -> f64 {
    (1.0 - x.abs()).max(0.0)
}

fn axis_taps(in_len: usize, out_len: usize) -> Vec<Taps> {
    let scale = in_len as f64 / out_len as f64;
    let stretch = scale.max(1.0);
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = ((center - stretch).floor().max(0.0)) as usize;
            let hi = ((center + stretch).ceil() as usize).min(in_len);
            let mut weights: Vec<f64> = (lo..hi)
                .map(|j| triangle((j as f64 + 0.5 - center) / stretch))
                .collect();
            let sum: f64 = weights.iter().sum();
            if sum > 0.0 {
                weights.iter_mut().for_each(|w| *w /= sum);
            } else {
                // Degenerate tap set; fall back to the nearest sample.
                let j = (center.floor() as usize).min(in_len - 1);
                return Taps {
                    start: j,
                    weights: vec![1.0],
                };
            }
            Taps { start: lo, weights }
        })
        .collect()
}

/// Resizes one plane to `out_h × out_w`.
pub fn resize_plane(src: ArrayView2<'_, f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0, "empty resize");
    if (h, w) == (out_h, out_w) {
        return src.to_owned();
    }
    let col_taps = axis_taps(w, out_w);
    let row_taps = axis_taps(h, out_h);
    let mut horiz = Array2::<f64>::zeros((h, out_w));
    for y in 0..h {
        let row = src.row(y);
        for (x, t) in col_taps.iter().enumerate() {
            horiz[[y, x]] = t
                .weights
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * row[t.start + k])
                .sum();
        }
    }
    let mut out = Array2::<f64>::zeros((out_h, out_w));
    for (y, t) in row_taps.iter().enumerate() {
        for (k, wt) in t.weights.iter().enumerate() {
            let r = horiz.row(t.start + k);
            out.row_mut(y).scaled_add(*wt, &r);
        }
    }
    out
}

/// Resizes a `C × H × W` image channel by channel, clamping to `[0, 1]`.
pub fn resize_image(image: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = image.dim();
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let mut out = Array3::<f32>::zeros((c, out_h, out_w));
    for (ch, plane) in image.axis_iter(Axis(0)).enumerate() {
        let p64 = plane.mapv(f64::from);
        let r = resize_plane(p64.view(), out_h, out_w);
        out.index_axis_mut(Axis(0), ch)
            .assign(&r.mapv(|v| v.clamp(0.0, 1.0) as f32));
    }
    out
}
