use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::Result;
use crate::pyramid_data::save_png;
use crate::resize::resize_image;

const OVERLAY_ALPHA: f32 = 0.5;

fn color(v: f64) -> [u8; 3] {
    let c = colorous::VIRIDIS.eval_continuous(v.clamp(0.0, 1.0));
    [c.r, c.g, c.b]
}

/// Fixed viridis mapping of `[0, 1]`; no per-image normalization.
pub fn colorize(map: &Array2<f64>) -> image::RgbImage {
    let (h, w) = map.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| image::Rgb(color(map[[y as usize, x as usize]])))
}

/// Heatmap blended over the input image resized to the map size.
pub fn overlay(map: &Array2<f64>, image: &Array3<f32>) -> image::RgbImage {
    let (h, w) = map.dim();
    let base = resize_image(image, h, w);
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (xu, yu) = (x as usize, y as usize);
        let heat = color(map[[yu, xu]]);
        image::Rgb(std::array::from_fn(|c| {
            let v = (1.0 - OVERLAY_ALPHA) * base[[c, yu, xu]] + OVERLAY_ALPHA * heat[c] as f32 / 255.0;
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    })
}

pub fn write_heatmap(path: &Path, map: &Array2<f64>) -> Result<()> {
    save_png(path, colorize(map))
}

pub fn write_overlay(path: &Path, map: &Array2<f64>, image: &Array3<f32>) -> Result<()> {
    save_png(path, overlay(map, image))
}
