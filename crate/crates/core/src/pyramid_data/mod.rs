//! Dataset ingestion for the MVTec folder layout, validation splits, image
//! pyramids and a procedural fixture generator.

mod fixture;
mod index;
mod split;

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resize::resize_image;

pub use fixture::{generate_synthetic_fixture, FixtureSpec, FIXTURE_CATEGORY};
pub use index::index_dataset;
pub use split::build_validation_split;

pub const GOOD: &str = "good";

/// Binarization threshold for 8-bit mask PNGs.
pub const MASK_THRESHOLD: u8 = 127;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One indexed file pair. Nothing is decoded until [`SampleRecord::load`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub defect_type: String,
    pub split: Split,
}

impl SampleRecord {
    pub fn is_good(&self) -> bool {
        self.defect_type == GOOD
    }

    /// File stem used to name per-sample outputs, e.g. `broken_small_003`.
    pub fn output_stem(&self) -> String {
        let stem = self
            .image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        format!("{}_{}", self.defect_type, stem)
    }

    pub fn load(&self, category: &str) -> Result<Sample> {
        let image = load_image(&self.image_path)?;
        let mask = match &self.mask_path {
            Some(p) => {
                let m = load_mask(p)?;
                let (_, h, w) = image.dim();
                if m.dim() != (h, w) {
                    return Err(Error::Integrity(format!(
                        "mask {} is {:?} but its image is {h}x{w}",
                        p.display(),
                        m.dim()
                    )));
                }
                Some(m)
            }
            None => None,
        };
        Ok(Sample {
            image,
            mask,
            category: category.to_string(),
            defect_type: self.defect_type.clone(),
            split: self.split,
        })
    }
}

/// A decoded sample.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `3 × H × W`, values in `[0, 1]`.
    pub image: Array3<f32>,
    /// `true` marks an anomalous pixel.
    pub mask: Option<Array2<bool>>,
    pub category: String,
    pub defect_type: String,
    pub split: Split,
}

impl Sample {
    /// Ground truth at the image size; all-normal for good samples.
    pub fn mask_or_empty(&self) -> Array2<bool> {
        let (_, h, w) = self.image.dim();
        self.mask.clone().unwrap_or_else(|| Array2::from_elem((h, w), false))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub category: String,
    /// Sorted lexicographically by image path.
    pub records: Vec<SampleRecord>,
}

impl DatasetIndex {
    /// `(train, val, test)` record counts.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let count = |s: Split| self.records.iter().filter(|r| r.split == s).count();
        (count(Split::Train), count(Split::Val), count(Split::Test))
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Distinct non-good defect types, sorted.
    pub fn defect_types(&self) -> Vec<String> {
        let mut types: Vec<String> = self
            .records
            .iter()
            .filter(|r| !r.is_good())
            .map(|r| r.defect_type.clone())
            .collect();
        types.sort();
        types.dedup();
        types
    }

    /// Decodes every record of `split`, in index order.
    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.records_in(split).map(|r| r.load(&self.category)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidSpec {
    pub scales: Vec<usize>,
}

impl Default for PyramidSpec {
    fn default() -> Self {
        PyramidSpec {
            scales: vec![128, 256, 384],
        }
    }
}

impl PyramidSpec {
    pub fn new(scales: Vec<usize>) -> Result<Self> {
        let spec = PyramidSpec { scales };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("pyramid needs at least one scale".into()));
        }
        if self.scales[0] == 0 || self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "pyramid scales must be positive and strictly increasing, got {:?}",
                self.scales
            )));
        }
        Ok(())
    }

    /// Every scale must be divisible by the teacher's deepest stride.
    pub fn validate_stride(&self, deepest_stride: usize) -> Result<()> {
        self.validate()?;
        if let Some(s) = self.scales.iter().find(|s| *s % deepest_stride != 0) {
            return Err(Error::Config(format!(
                "scale {s} is not divisible by the deepest stride {deepest_stride}"
            )));
        }
        Ok(())
    }
}

/// One square resize per scale, values clamped to `[0, 1]`.
pub fn make_pyramid(image: &Array3<f32>, spec: &PyramidSpec) -> Result<Vec<Array3<f32>>> {
    spec.validate()?;
    Ok(spec.scales.iter().map(|&s| resize_image(image, s, s)).collect())
}

/// Decodes an 8-bit PNG into `3 × H × W` floats in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

pub fn load_mask(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path)
        .map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] > MASK_THRESHOLD
    }))
}

pub fn save_image(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (_, h, w) = image.dim();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| {
            (image[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    });
    save_png(path, buf)
}

pub fn save_mask(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    save_png(path, buf)
}

pub(crate) fn save_png<P, C>(path: &Path, buf: image::ImageBuffer<P, C>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Load {
                path: path.to_path_buf(),
                reason: other.to_string(),
            },
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pyramid_sizes_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Array3::from_shape_fn((3, 256, 256), |_| rng.gen_range(0.0..1.0f32));
        let p = make_pyramid(&img, &PyramidSpec::default()).unwrap();
        let sides: Vec<usize> = p.iter().map(|i| i.dim().1).collect();
        assert_eq!(sides, vec![128, 256, 384]);
        assert_eq!(p[1], img);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Array3::from_elem((3, 50, 70), 0.4f32);
        for level in make_pyramid(&img, &PyramidSpec::new(vec![32, 64]).unwrap()).unwrap() {
            assert!(level.iter().all(|v| (v - 0.4).abs() < 1e-6));
        }
    }

    #[test]
    fn spec_validation() {
        assert!(PyramidSpec::new(vec![]).is_err());
        assert!(PyramidSpec::new(vec![64, 64]).is_err());
        assert!(PyramidSpec::new(vec![128, 64]).is_err());
        let s = PyramidSpec::new(vec![32, 48]).unwrap();
        assert!(s.validate_stride(16).is_ok());
        assert!(s.validate_stride(32).is_err());
    }

    #[test]
    fn image_and_mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array3::from_shape_fn((3, 5, 7), |(c, y, x)| ((c * 35 + y * 7 + x) % 256) as f32 / 255.0);
        let p = dir.path().join("a/img.png");
        save_image(&p, &img).unwrap();
        let back = load_image(&p).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        let mask = Array2::from_shape_fn((5, 7), |(y, x)| (y + x) % 3 == 0);
        let mp = dir.path().join("m.png");
        save_mask(&mp, &mask).unwrap();
        assert_eq!(load_mask(&mp).unwrap(), mask);
    }

    #[test]
    fn corrupt_png_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not a png").unwrap();
        assert!(matches!(load_image(&p), Err(Error::Load { .. })));
    }
}
