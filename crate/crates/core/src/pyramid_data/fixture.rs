//! Procedural MVTec-style tree for desk-scale runs.
//!
//! Normals are a smooth low-frequency colour field over a regular grid.
//! Anomalies are normals with one pasted region of foreign texture: either
//! saturated diagonal stripes (`patch`) or an ellipse of colour speckle
//! (`blob`). Each region spans 10-25% of the image side in each direction
//! and its mask is exactly the set of altered pixels.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{index_dataset, save_image, save_mask, DatasetIndex, GOOD};
use crate::error::{Error, Result};
use crate::resize::resize_plane;

pub const FIXTURE_CATEGORY: &str = "synthetic";
const DEFECTS: [&str; 2] = ["patch", "blob"];
const GRID: usize = 8;
const MIN_SIDE: f64 = 0.10;
const MAX_SIDE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub n_normal: usize,
    pub n_anomalous: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            n_normal: 16,
            n_anomalous: 8,
            size: 64,
            seed: 3,
        }
    }
}

impl FixtureSpec {
    /// Good images placed in the test split next to the anomalies.
    pub fn n_test_good(&self) -> usize {
        (self.n_anomalous / 4).max(2)
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal_texture(size: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    const BASE: [f64; 3] = [0.55, 0.47, 0.38];
    let mut img = Array3::<f32>::zeros((3, size, size));
    let offset = rng.gen_range(0..GRID);
    for c in 0..3 {
        let coarse = Array2::from_shape_fn((5, 5), |_| rng.gen_range(-0.08..0.08));
        let field = resize_plane(coarse.view(), size, size);
        for y in 0..size {
            for x in 0..size {
                let line = (y + offset) % GRID == 0 || (x + offset) % GRID == 0;
                let grain = rng.gen_range(-0.02..0.02);
                let v = BASE[c] + field[[y, x]] + grain - if line { 0.15 } else { 0.0 };
                img[[c, y, x]] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

fn insert_defect(img: &mut Array3<f32>, kind: &str, rng: &mut ChaCha8Rng) -> Array2<bool> {
    let (_, size, _) = img.dim();
    let side = |rng: &mut ChaCha8Rng| ((rng.gen_range(MIN_SIDE..=MAX_SIDE) * size as f64).round() as usize).max(2);
    let (h, w) = (side(rng), side(rng));
    let top = rng.gen_range(0..=size - h);
    let left = rng.gen_range(0..=size - w);
    let mut mask = Array2::from_elem((size, size), false);
    match kind {
        "patch" => {
            let period = rng.gen_range(3..6);
            for y in top..top + h {
                for x in left..left + w {
                    let band = ((x + y) / period) % 2 == 0;
                    let rgb = if band { [0.05, 0.85, 0.95] } else { [0.95, 0.1, 0.75] };
                    for c in 0..3 {
                        img[[c, y, x]] = rgb[c];
                    }
                    mask[[y, x]] = true;
                }
            }
        }
        _ => {
            let (cy, cx) = (top as f64 + h as f64 / 2.0, left as f64 + w as f64 / 2.0);
            let (ry, rx) = (h as f64 / 2.0, w as f64 / 2.0);
            for y in top..top + h {
                for x in left..left + w {
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    if dy * dy + dx * dx <= 1.0 {
                        for c in 0..3 {
                            img[[c, y, x]] = if rng.gen_bool(0.5) { rng.gen_range(0.0..0.15) } else { rng.gen_range(0.85..1.0) };
                        }
                        mask[[y, x]] = true;
                    }
                }
            }
        }
    }
    mask
}

/// Writes `out_root/synthetic/...` and returns its index.
pub fn generate_synthetic_fixture(out_root: &Path, spec: &FixtureSpec) -> Result<DatasetIndex> {
    if spec.size < 32 {
        return Err(Error::contract(format!("fixture image size must be at least 32, got {}", spec.size)));
    }
    if spec.n_normal == 0 {
        return Err(Error::contract("fixture needs at least one normal image"));
    }
    let base = out_root.join(FIXTURE_CATEGORY);
    let mut id = 0u64;
    let mut next = || {
        id += 1;
        stream(spec.seed, id)
    };
    for i in 0..spec.n_normal {
        let img = normal_texture(spec.size, &mut next());
        save_image(&base.join(format!("train/{GOOD}/{i:03}.png")), &img)?;
    }
    for i in 0..spec.n_test_good() {
        let img = normal_texture(spec.size, &mut next());
        save_image(&base.join(format!("test/{GOOD}/{i:03}.png")), &img)?;
    }
    let mut per_kind = [0usize; DEFECTS.len()];
    for i in 0..spec.n_anomalous {
        let k = i % DEFECTS.len();
        let kind = DEFECTS[k];
        let n = per_kind[k];
        per_kind[k] += 1;
        let mut rng = next();
        let mut img = normal_texture(spec.size, &mut rng);
        let mask = insert_defect(&mut img, kind, &mut rng);
        save_image(&base.join(format!("test/{kind}/{n:03}.png")), &img)?;
        save_mask(&base.join(format!("ground_truth/{kind}/{n:03}_mask.png")), &mask)?;
    }
    index_dataset(out_root, FIXTURE_CATEGORY)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid_data::Split;

    #[test]
    fn fixture_indexes_with_expected_counts() {
        let dir = tempfile::tempdir().unwrap();
        let idx = generate_synthetic_fixture(dir.path(), &FixtureSpec::default()).unwrap();
        let (train, val, test) = idx.split_counts();
        assert_eq!((train, val), (16, 0));
        let defects = idx.records_in(Split::Test).filter(|r| !r.is_good()).count();
        assert_eq!(defects, 8);
        assert_eq!(test, 8 + 2);
    }

    #[test]
    fn masks_cover_bounded_area_and_match_image_size() {
        let dir = tempfile::tempdir().unwrap();
        let idx = generate_synthetic_fixture(dir.path(), &FixtureSpec::default()).unwrap();
        for r in idx.records_in(Split::Test).filter(|r| !r.is_good()) {
            let s = r.load(&idx.category).unwrap();
            let m = s.mask.unwrap();
            assert_eq!(m.dim(), (64, 64));
            let frac = m.iter().filter(|&&b| b).count() as f64 / m.len() as f64;
            assert!(frac > 0.0 && frac <= 0.26 * 0.26, "{frac}");
        }
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = FixtureSpec {
            n_normal: 3,
            n_anomalous: 2,
            size: 32,
            seed: 5,
        };
        let ia = generate_synthetic_fixture(a.path(), &spec).unwrap();
        let ib = generate_synthetic_fixture(b.path(), &spec).unwrap();
        assert_eq!(ia.records.len(), ib.records.len());
        for (ra, rb) in ia.records.iter().zip(&ib.records) {
            assert_eq!(std::fs::read(&ra.image_path).unwrap(), std::fs::read(&rb.image_path).unwrap());
        }
    }

    #[test]
    fn tiny_size_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FixtureSpec {
            size: 16,
            ..FixtureSpec::default()
        };
        assert!(generate_synthetic_fixture(dir.path(), &spec).is_err());
    }
}
