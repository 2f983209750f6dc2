//! Per-pixel anomaly scores and their fusion across levels and scales.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::backbone::{extract_features, FeatureMap, TeacherNetwork};
use crate::error::{Error, Result};
use crate::exec;
use crate::resize::{resize_image, resize_plane};
use crate::scale_search::{weighted_fusion, WeightVector};
use crate::student::{BlockId, ScaleBank};
use crate::training::pixel_distances;

/// Factor mapping the `[0, 4]` normalized squared distance onto `[0, 1]`.
pub const SCORE_SCALE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Block(BlockId),
    Level(usize),
    Fused,
}

#[derive(Clone, Debug)]
pub struct ScoreMap {
    pub data: Array2<f64>,
    pub provenance: Provenance,
}

impl ScoreMap {
    pub fn new(data: Array2<f64>, provenance: Provenance) -> Self {
        ScoreMap { data, provenance }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceSize {
    pub height: usize,
    pub width: usize,
}

impl ReferenceSize {
    pub fn square(side: usize) -> Self {
        ReferenceSize {
            height: side,
            width: side,
        }
    }
}

/// How `(scale, level)` maps are averaged when no weights are given.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// One mean over every map.
    #[default]
    Flat,
    /// Mean within each scale, then mean over scales.
    PerScale,
}

/// `0.25 · ‖t̂ − ŝ‖²` at every pixel of one level.
pub fn level_score_map(teacher: &FeatureMap, student: &FeatureMap, epsilon: f64) -> Result<ScoreMap> {
    if teacher.data.shape() != student.data.shape() {
        return Err(Error::contract(format!(
            "level {}: teacher shape {:?} vs student shape {:?}",
            teacher.level,
            teacher.data.shape(),
            student.data.shape()
        )));
    }
    let d = pixel_distances(teacher.data.view(), student.data.view(), epsilon);
    Ok(ScoreMap::new(
        d.mapv(|v| (v * SCORE_SCALE).clamp(0.0, 1.0)),
        Provenance::Level(teacher.level),
    ))
}

/// Bilinear upsampling to `target`. Downscaling is rejected.
pub fn upsample_score(map: &ScoreMap, target: ReferenceSize) -> Result<ScoreMap> {
    let (h, w) = map.dim();
    if target.height < h || target.width < w {
        return Err(Error::contract(format!(
            "cannot upsample a {h}x{w} score map to the smaller {}x{}",
            target.height, target.width
        )));
    }
    let data = resize_plane(map.data.view(), target.height, target.width);
    Ok(ScoreMap::new(data.mapv(|v| v.clamp(0.0, 1.0)), map.provenance))
}

fn mean_of(maps: &[&Array2<f64>]) -> Array2<f64> {
    let mut acc = Array2::<f64>::zeros(maps[0].raw_dim());
    for m in maps {
        acc += *m;
    }
    acc / maps.len() as f64
}

/// Upsamples every map to `target` and averages over the maps present.
pub fn fuse_levels(maps: &[ScoreMap], target: ReferenceSize) -> Result<ScoreMap> {
    if maps.is_empty() {
        return Err(Error::contract("nothing to fuse"));
    }
    let up = maps
        .iter()
        .map(|m| upsample_score(m, target))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Array2<f64>> = up.iter().map(|m| &m.data).collect();
    Ok(ScoreMap::new(mean_of(&refs), Provenance::Fused))
}

/// Score maps for every block of one bank on one image, upsampled to `target`
/// and ordered by level.
pub fn bank_block_maps(
    bank: &ScaleBank,
    teacher: &TeacherNetwork,
    image: &Array3<f32>,
    target: ReferenceSize,
    epsilon: f64,
) -> Result<Vec<ScoreMap>> {
    let scale = bank.scale();
    let resized = resize_image(image, scale, scale);
    let teacher_feats = extract_features(teacher, &resized)?;
    let student_feats = bank.forward(&teacher_feats)?;
    student_feats
        .iter()
        .map(|s| {
            let m = level_score_map(&teacher_feats[s.level - 1], s, epsilon)?;
            let mut up = upsample_score(&m, target)?;
            up.provenance = Provenance::Block(BlockId {
                scale,
                level: s.level,
            });
            Ok(up)
        })
        .collect()
}

/// Per-block maps for all banks, in bank order then level order. Banks are
/// processed in parallel when enabled.
pub fn block_score_maps(
    banks: &[ScaleBank],
    teacher: &TeacherNetwork,
    image: &Array3<f32>,
    target: ReferenceSize,
    epsilon: f64,
) -> Result<Vec<ScoreMap>> {
    let per_bank = exec::map_slice(banks, |b| bank_block_maps(b, teacher, image, target, epsilon));
    let mut out = Vec::new();
    for maps in per_bank {
        out.extend(maps?);
    }
    Ok(out)
}

/// Fuses already-computed per-block maps at reference size.
pub fn fuse_block_maps(maps: &[ScoreMap], weights: Option<&WeightVector>, mode: FusionMode) -> Result<ScoreMap> {
    if maps.is_empty() {
        return Err(Error::contract("no student blocks to score with"));
    }
    if let Some(w) = weights {
        if w.values.len() != maps.len() {
            return Err(Error::contract(format!(
                "{} weights given for {} retained blocks",
                w.values.len(),
                maps.len()
            )));
        }
        let mut ordered = Vec::with_capacity(maps.len());
        for id in &w.block_ids {
            let m = maps
                .iter()
                .find(|m| m.provenance == Provenance::Block(*id))
                .ok_or_else(|| Error::contract(format!("weight given for block {id}, which is not retained")))?;
            ordered.push(m.clone());
        }
        let mut fused = weighted_fusion(&ordered, w)?;
        fused.provenance = Provenance::Fused;
        return Ok(fused);
    }
    let data = match mode {
        FusionMode::Flat => mean_of(&maps.iter().map(|m| &m.data).collect::<Vec<_>>()),
        FusionMode::PerScale => {
            let mut scales: Vec<usize> = maps
                .iter()
                .filter_map(|m| match m.provenance {
                    Provenance::Block(id) => Some(id.scale),
                    _ => None,
                })
                .collect();
            scales.dedup();
            if scales.is_empty() {
                mean_of(&maps.iter().map(|m| &m.data).collect::<Vec<_>>())
            } else {
                let per_scale: Vec<Array2<f64>> = scales
                    .iter()
                    .map(|s| {
                        let group: Vec<&Array2<f64>> = maps
                            .iter()
                            .filter(|m| matches!(m.provenance, Provenance::Block(id) if id.scale == *s))
                            .map(|m| &m.data)
                            .collect();
                        mean_of(&group)
                    })
                    .collect();
                mean_of(&per_scale.iter().collect::<Vec<_>>())
            }
        }
    };
    Ok(ScoreMap::new(data.mapv(|v| v.clamp(0.0, 1.0)), Provenance::Fused))
}

/// Full image-pyramid scoring: every bank sees the image resized to its
/// scale; all retained block maps are brought to `target` and fused, either
/// uniformly or with `weights`.
pub fn multi_scale_score(
    banks: &[ScaleBank],
    teacher: &TeacherNetwork,
    image: &Array3<f32>,
    target: ReferenceSize,
    weights: Option<&WeightVector>,
    mode: FusionMode,
    epsilon: f64,
) -> Result<ScoreMap> {
    let maps = block_score_maps(banks, teacher, image, target, epsilon)?;
    fuse_block_maps(&maps, weights, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::FeatureSource;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fm(data: Array3<f32>) -> FeatureMap {
        FeatureMap::new(data, 2, FeatureSource::Teacher)
    }

    #[test]
    fn identical_features_score_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Array3::from_shape_fn((4, 3, 3), |_| rng.gen_range(-1.0..1.0f32));
        let m = level_score_map(&fm(a.clone()), &fm(a), 1e-12).unwrap();
        assert!(m.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn antipodal_vectors_score_one() {
        let mut t = Array3::<f32>::zeros((2, 2, 2));
        let mut s = Array3::<f32>::zeros((2, 2, 2));
        t.fill(1.0);
        s.fill(1.0);
        t[[0, 1, 1]] = 1.0;
        t[[1, 1, 1]] = 0.0;
        s[[0, 1, 1]] = -3.0;
        s[[1, 1, 1]] = 0.0;
        let m = level_score_map(&fm(t), &fm(s), 1e-12).unwrap();
        assert!((m.data[[1, 1]] - 1.0).abs() < 1e-12);
        assert_eq!(m.data[[0, 0]], 0.0);
    }

    #[test]
    fn level_map_matches_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Array3::from_shape_fn((5, 3, 4), |_| rng.gen_range(-1.0..1.0f32));
        let s = Array3::from_shape_fn((5, 3, 4), |_| rng.gen_range(-1.0..1.0f32));
        let m = level_score_map(&fm(t.clone()), &fm(s.clone()), 1e-12).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                let tn: f64 = (0..5).map(|c| (t[[c, y, x]] as f64).powi(2)).sum::<f64>().sqrt();
                let sn: f64 = (0..5).map(|c| (s[[c, y, x]] as f64).powi(2)).sum::<f64>().sqrt();
                let d: f64 = (0..5)
                    .map(|c| (t[[c, y, x]] as f64 / tn - s[[c, y, x]] as f64 / sn).powi(2))
                    .sum();
                assert!((m.data[[y, x]] - 0.25 * d).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn upsample_rejects_shrinking_and_keeps_constants() {
        let m = ScoreMap::new(Array2::from_elem((4, 4), 0.3), Provenance::Level(2));
        assert!(upsample_score(&m, ReferenceSize::square(2)).is_err());
        let up = upsample_score(&m, ReferenceSize::square(11)).unwrap();
        assert!(up.data.iter().all(|v| (v - 0.3).abs() < 1e-12));
        let single = ScoreMap::new(Array2::from_elem((1, 1), 0.9), Provenance::Level(3));
        let up = upsample_score(&single, ReferenceSize::square(8)).unwrap();
        assert!(up.data.iter().all(|v| (v - 0.9).abs() < 1e-12));
    }

    #[test]
    fn fuse_levels_averages() {
        let z = ScoreMap::new(Array2::zeros((2, 2)), Provenance::Level(2));
        let o = ScoreMap::new(Array2::ones((4, 4)), Provenance::Level(3));
        let f = fuse_levels(&[z.clone(), o], ReferenceSize::square(4)).unwrap();
        assert!(f.data.iter().all(|v| (v - 0.5).abs() < 1e-12));
        let single = fuse_levels(&[z], ReferenceSize::square(4)).unwrap();
        assert!(single.data.iter().all(|&v| v == 0.0));
        assert!(fuse_levels(&[], ReferenceSize::square(4)).is_err());
    }

    #[test]
    fn per_scale_fusion_equals_flat_when_level_counts_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let maps: Vec<ScoreMap> = [(32, 2), (32, 3), (64, 2), (64, 3)]
            .into_iter()
            .map(|(scale, level)| {
                ScoreMap::new(
                    Array2::from_shape_fn((4, 4), |_| rng.gen_range(0.0..1.0)),
                    Provenance::Block(BlockId { scale, level }),
                )
            })
            .collect();
        let flat = fuse_block_maps(&maps, None, FusionMode::Flat).unwrap();
        let nested = fuse_block_maps(&maps, None, FusionMode::PerScale).unwrap();
        for (a, b) in flat.data.iter().zip(nested.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Unequal counts make the two orders differ.
        let nested3 = fuse_block_maps(&maps[..3], None, FusionMode::PerScale).unwrap();
        let flat3 = fuse_block_maps(&maps[..3], None, FusionMode::Flat).unwrap();
        assert!(flat3.data.iter().zip(nested3.data.iter()).any(|(a, b)| (a - b).abs() > 1e-6));
    }
}
