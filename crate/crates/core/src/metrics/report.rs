use std::fmt::Write as _;

use super::EvalResult;

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryRow {
    pub category: String,
    pub auroc: f64,
    pub aupro: f64,
    pub images: usize,
    pub regions: usize,
}

impl CategoryRow {
    pub fn new(category: &str, r: &EvalResult) -> Self {
        CategoryRow {
            category: category.to_string(),
            auroc: r.auroc,
            aupro: r.aupro,
            images: r.images,
            regions: r.regions,
        }
    }
}

/// Per-category rows plus their means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<CategoryRow>,
    pub fingerprint: Option<String>,
    /// Free-form lines appended to the text form.
    pub notes: Vec<String>,
}

impl Report {
    pub fn mean(&self) -> Option<(f64, f64)> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        Some((
            self.rows.iter().map(|r| r.auroc).sum::<f64>() / n,
            self.rows.iter().map(|r| r.aupro).sum::<f64>() / n,
        ))
    }

    pub fn to_csv(&self) -> String {
        let fp = self.fingerprint.as_deref().unwrap_or("");
        let mut s = String::from("category,auroc,aupro,images,regions,fingerprint\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{},{},{fp}",
                r.category, r.auroc, r.aupro, r.images, r.regions
            );
        }
        if let Some((a, p)) = self.mean() {
            let _ = writeln!(s, "mean,{a:.6},{p:.6},,,{fp}");
        }
        s
    }

    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.category.len())
            .max()
            .unwrap_or(0)
            .max("category".len());
        let mut s = String::new();
        if let Some(fp) = &self.fingerprint {
            let _ = writeln!(s, "fingerprint: {fp}");
        }
        let _ = writeln!(s, "{:<width$}  {:>7}  {:>7}", "category", "AUROC", "AUPRO");
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {:>7.3}  {:>7.3}", r.category, r.auroc, r.aupro);
        }
        if let Some((a, p)) = self.mean() {
            let _ = writeln!(s, "{:<width$}  {a:>7.3}  {p:>7.3}", "mean");
        }
        for n in &self.notes {
            let _ = writeln!(s, "{n}");
        }
        s
    }
}
