use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetIndex, SampleRecord, Split};
use crate::error::{Error, Result};

/// Moves a labeled validation subset out of the test split.
///
/// `⌈coverage · #types⌉` defect types are picked by a seeded shuffle; from
/// each, `max(1, round(fraction · n))` images move to validation together
/// with the same total number of good test images (as many as exist).
/// Returns `(val, rest)`, where `rest` is the input minus the moved records.
pub fn build_validation_split(
    index: &DatasetIndex,
    coverage: f64,
    fraction: f64,
    seed: u64,
) -> Result<(DatasetIndex, DatasetIndex)> {
    if !(0.0..=1.0).contains(&coverage) {
        return Err(Error::contract(format!("coverage must be in [0, 1], got {coverage}")));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::contract(format!("per-type fraction must be in (0, 1], got {fraction}")));
    }
    let types = index.defect_types();
    if coverage > 0.0 && types.is_empty() {
        return Err(Error::contract("validation coverage requested but the test split has no defect types"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = types.clone();
    chosen.shuffle(&mut rng);
    chosen.truncate((coverage * types.len() as f64).ceil() as usize);
    chosen.sort();

    let test: Vec<&SampleRecord> = index.records_in(Split::Test).collect();
    let mut moved: Vec<&SampleRecord> = Vec::new();
    for t in &chosen {
        let mut pool: Vec<&SampleRecord> = test.iter().copied().filter(|r| &r.defect_type == t).collect();
        let take = ((fraction * pool.len() as f64).round() as usize).clamp(1, pool.len());
        pool.shuffle(&mut rng);
        moved.extend(pool.into_iter().take(take));
    }
    let defects_moved = moved.len();
    let mut goods: Vec<&SampleRecord> = test.iter().copied().filter(|r| r.is_good()).collect();
    goods.shuffle(&mut rng);
    moved.extend(goods.into_iter().take(defects_moved));

    let is_moved = |r: &SampleRecord| moved.iter().any(|m| m.image_path == r.image_path);
    let mut val: Vec<SampleRecord> = index
        .records
        .iter()
        .filter(|r| is_moved(r))
        .map(|r| SampleRecord {
            split: Split::Val,
            ..r.clone()
        })
        .collect();
    val.sort_by(|a, b| a.image_path.cmp(&b.image_path));
    let rest = index.records.iter().filter(|r| !is_moved(r)).cloned().collect();
    let wrap = |records| DatasetIndex {
        root: index.root.clone(),
        category: index.category.clone(),
        records,
    };
    Ok((wrap(val), wrap(rest)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn index(types: usize, per_type: usize, goods: usize) -> DatasetIndex {
        let mut records = Vec::new();
        let rec = |t: &str, i: usize, split| SampleRecord {
            image_path: PathBuf::from(format!("{t}/{i:03}.png")),
            mask_path: (t != "good").then(|| PathBuf::from(format!("gt/{t}/{i:03}_mask.png"))),
            defect_type: t.to_string(),
            split,
        };
        for i in 0..4 {
            records.push(rec("good", 100 + i, Split::Train));
        }
        for i in 0..goods {
            records.push(rec("good", i, Split::Test));
        }
        for t in 0..types {
            for i in 0..per_type {
                records.push(rec(&format!("d{t}"), i, Split::Test));
            }
        }
        records.sort_by(|a, b| a.image_path.cmp(&b.image_path));
        DatasetIndex {
            root: PathBuf::from("/data"),
            category: "c".into(),
            records,
        }
    }

    #[test]
    fn zero_coverage_leaves_test_untouched() {
        let idx = index(3, 4, 5);
        let (val, rest) = build_validation_split(&idx, 0.0, 0.1, 1).unwrap();
        assert!(val.records.is_empty());
        assert_eq!(rest, idx);
    }

    #[test]
    fn full_coverage_takes_one_per_type_plus_goods() {
        let idx = index(5, 10, 8);
        let (val, rest) = build_validation_split(&idx, 1.0, 0.1, 1).unwrap();
        for t in 0..5 {
            let n = val.records.iter().filter(|r| r.defect_type == format!("d{t}")).count();
            assert_eq!(n, 1);
        }
        assert_eq!(val.records.iter().filter(|r| r.is_good()).count(), 5);
        assert!(val.records.iter().all(|r| r.split == Split::Val));
        for r in &val.records {
            assert!(!rest.records.iter().any(|q| q.image_path == r.image_path));
        }
        assert_eq!(val.records.len() + rest.records.len(), idx.records.len());
    }

    #[test]
    fn partial_coverage_rounds_up_and_is_deterministic() {
        let idx = index(5, 10, 8);
        let (a, _) = build_validation_split(&idx, 0.5, 0.1, 9).unwrap();
        let (b, _) = build_validation_split(&idx, 0.5, 0.1, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.defect_types().len(), 3);
    }

    #[test]
    fn coverage_without_defects_is_an_error() {
        let idx = index(0, 0, 3);
        assert!(build_validation_split(&idx, 0.5, 0.1, 1).is_err());
        assert!(build_validation_split(&idx, 0.0, 0.1, 1).is_ok());
        assert!(build_validation_split(&index(1, 2, 2), 1.5, 0.1, 1).is_err());
    }
}
