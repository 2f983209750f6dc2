//! Threshold-free localization metrics: pixel AUROC and AUPRO.

mod pro;
mod report;
mod roc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use pro::{aupro, aupro_from_curve, connected_components, partial_area, pixel_curve, Components, CurvePoint, PixelCurve};
pub use report::{CategoryRow, Report};
pub use roc::auroc;

pub const DEFAULT_FPR_LIMIT: f64 = 0.3;
pub const DEFAULT_MAX_THRESHOLDS: usize = 5000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub fpr_limit: f64,
    pub max_thresholds: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            fpr_limit: DEFAULT_FPR_LIMIT,
            max_thresholds: DEFAULT_MAX_THRESHOLDS,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub auroc: f64,
    pub aupro: f64,
    pub images: usize,
    pub regions: usize,
    /// Sweep samples, decreasing threshold.
    pub curve: Vec<CurvePoint>,
}

/// AUROC over all pixels of all images pooled, plus AUPRO with a
/// dataset-level FPR.
pub fn evaluate(maps: &[Array2<f64>], masks: &[Array2<bool>], config: &MetricConfig) -> Result<EvalResult> {
    if maps.len() != masks.len() {
        return Err(Error::contract(format!(
            "{} score maps but {} ground-truth masks",
            maps.len(),
            masks.len()
        )));
    }
    let curve = pixel_curve(maps, masks, config.max_thresholds)?;
    let scores: Vec<f64> = maps.iter().flat_map(|m| m.iter().copied()).collect();
    let labels: Vec<bool> = masks.iter().flat_map(|m| m.iter().copied()).collect();
    Ok(EvalResult {
        auroc: auroc(&scores, &labels)?,
        aupro: aupro_from_curve(&curve, config.fpr_limit),
        images: maps.len(),
        regions: curve.regions,
        curve: curve.points,
    })
}
