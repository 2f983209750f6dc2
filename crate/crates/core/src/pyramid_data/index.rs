use std::path::{Path, PathBuf};

use super::{DatasetIndex, SampleRecord, Split, GOOD};
use crate::error::{Error, Result};

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect())
}

/// Indexes `root/category` laid out as `train/good`, `test/<defect>` and
/// `ground_truth/<defect>/<stem>_mask.png`.
pub fn index_dataset(root: &Path, category: &str) -> Result<DatasetIndex> {
    let base = root.join(category);
    if !base.is_dir() {
        return Err(Error::Layout(format!("{} is not a directory", base.display())));
    }
    let train_dir = base.join("train").join(GOOD);
    if !train_dir.is_dir() {
        return Err(Error::Layout(format!("missing {}", train_dir.display())));
    }
    let test_dir = base.join("test");
    if !test_dir.is_dir() {
        return Err(Error::Layout(format!("missing {}", test_dir.display())));
    }
    let mut records = Vec::new();
    let train = pngs(&train_dir)?;
    if train.is_empty() {
        return Err(Error::contract(format!("{} holds no training images", train_dir.display())));
    }
    records.extend(train.into_iter().map(|image_path| SampleRecord {
        image_path,
        mask_path: None,
        defect_type: GOOD.into(),
        split: Split::Train,
    }));
    for dir in sorted_entries(&test_dir)?.into_iter().filter(|p| p.is_dir()) {
        let defect = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        for image_path in pngs(&dir)? {
            let mask_path = if defect == GOOD {
                None
            } else {
                let stem = image_path.file_stem().unwrap_or_default().to_string_lossy();
                let m = base
                    .join("ground_truth")
                    .join(&defect)
                    .join(format!("{stem}_mask.png"));
                if !m.is_file() {
                    return Err(Error::Integrity(format!(
                        "{} has no mask (expected {})",
                        image_path.display(),
                        m.display()
                    )));
                }
                Some(m)
            };
            records.push(SampleRecord {
                image_path,
                mask_path,
                defect_type: defect.clone(),
                split: Split::Test,
            });
        }
    }
    records.sort_by(|a, b| a.image_path.cmp(&b.image_path));
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        category: category.to_string(),
        records,
    })
}
