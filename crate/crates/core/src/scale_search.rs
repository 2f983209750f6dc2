//! Learnable per-block fusion weights and top-k pruning.
//!
//! Each student block gets a logit; the fused map is the softmax-weighted
//! sum of the block maps, and the logits are fitted by plain gradient
//! descent on pixel-wise binary cross-entropy against validation masks.
//! The networks themselves are never touched: block maps are computed once
//! and cached.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::backbone::TeacherNetwork;
use crate::error::{Error, Result};
use crate::exec;
use crate::scoring::{block_score_maps, Provenance, ReferenceSize, ScoreMap};
use crate::student::{BlockId, ScaleBank};

/// Probability clamp used inside the cross-entropy.
pub const CE_CLAMP: f64 = 1e-7;

pub const WEIGHT_FILE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightLogits {
    pub values: Vec<f64>,
    pub block_ids: Vec<BlockId>,
    pub iteration: usize,
    pub learning_rate: f64,
}

impl WeightLogits {
    /// All-zero logits, i.e. uniform weights.
    pub fn uniform(block_ids: Vec<BlockId>, learning_rate: f64) -> Self {
        WeightLogits {
            values: vec![0.0; block_ids.len()],
            block_ids,
            iteration: 0,
            learning_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    pub values: Vec<f64>,
    pub block_ids: Vec<BlockId>,
}

impl WeightVector {
    pub fn uniform(block_ids: Vec<BlockId>) -> Self {
        let n = block_ids.len();
        WeightVector {
            values: vec![1.0 / n as f64; n],
            block_ids,
        }
    }
}

fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `ω_i = exp(ω̂_i) / Σ_j exp(ω̂_j)` with max-subtraction.
pub fn softmax_weights(logits: &WeightLogits) -> WeightVector {
    WeightVector {
        values: softmax(&logits.values),
        block_ids: logits.block_ids.clone(),
    }
}

/// `Σ ω_i φ_i`, pixel-wise.
pub fn weighted_fusion(maps: &[ScoreMap], weights: &WeightVector) -> Result<ScoreMap> {
    if maps.len() != weights.values.len() || maps.is_empty() {
        return Err(Error::contract(format!(
            "{} maps but {} weights",
            maps.len(),
            weights.values.len()
        )));
    }
    let dim = maps[0].dim();
    if let Some(bad) = maps.iter().find(|m| m.dim() != dim) {
        return Err(Error::contract(format!(
            "fusion maps must share one size: {:?} vs {:?}",
            dim,
            bad.dim()
        )));
    }
    let mut acc = Array2::<f64>::zeros(dim);
    for (m, &w) in maps.iter().zip(&weights.values) {
        acc.scaled_add(w, &m.data);
    }
    Ok(ScoreMap::new(acc.mapv(|v| v.clamp(0.0, 1.0)), Provenance::Fused))
}

fn bce(p: f64, anomalous: bool) -> f64 {
    let c = p.clamp(CE_CLAMP, 1.0 - CE_CLAMP);
    if anomalous {
        -c.ln()
    } else {
        -(1.0 - c).ln()
    }
}

/// Mean pixel-wise binary cross-entropy of `fused` (as probabilities)
/// against `gt`.
pub fn validation_loss(fused: &ScoreMap, gt: &Array2<bool>) -> Result<f64> {
    if fused.dim() != gt.dim() {
        return Err(Error::contract(format!(
            "score map {:?} vs mask {:?}",
            fused.dim(),
            gt.dim()
        )));
    }
    let n = gt.len() as f64;
    let mut sum = 0.0;
    Zip::from(&fused.data).and(gt).for_each(|&p, &y| sum += bce(p, y));
    Ok(sum / n)
}

/// One validation image: the raw `[0, 1]` image and its reference-size mask.
pub struct ValidationSample {
    pub image: Array3<f32>,
    pub mask: Array2<bool>,
}

/// Per-block score maps of the validation set, computed once with all
/// networks frozen.
#[derive(Clone, Debug)]
pub struct BlockScoreCache {
    pub block_ids: Vec<BlockId>,
    /// `maps[image][block]`
    pub maps: Vec<Vec<Array2<f64>>>,
    pub masks: Vec<Array2<bool>>,
}

impl BlockScoreCache {
    pub fn build(
        banks: &[ScaleBank],
        teacher: &TeacherNetwork,
        val: &[ValidationSample],
        reference: ReferenceSize,
        epsilon: f64,
    ) -> Result<Self> {
        if val.is_empty() {
            return Err(Error::contract("validation set is empty"));
        }
        let block_ids: Vec<BlockId> = banks.iter().flat_map(|b| b.block_ids()).collect();
        if block_ids.is_empty() {
            return Err(Error::contract("no student blocks to weight"));
        }
        let per_image = exec::map_slice(val, |s| {
            block_score_maps(banks, teacher, &s.image, reference, epsilon)
        });
        let mut maps = Vec::with_capacity(val.len());
        for (sample, m) in val.iter().zip(per_image) {
            let m = m?;
            if sample.mask.dim() != (reference.height, reference.width) {
                return Err(Error::contract(format!(
                    "validation mask {:?} is not at reference size {}x{}",
                    sample.mask.dim(),
                    reference.height,
                    reference.width
                )));
            }
            maps.push(m.into_iter().map(|s| s.data).collect());
        }
        Ok(BlockScoreCache {
            block_ids,
            maps,
            masks: val.iter().map(|s| s.mask.clone()).collect(),
        })
    }

    pub fn from_maps(block_ids: Vec<BlockId>, maps: Vec<Vec<Array2<f64>>>, masks: Vec<Array2<bool>>) -> Result<Self> {
        if maps.is_empty() || maps.len() != masks.len() {
            return Err(Error::contract("validation maps and masks must be non-empty and aligned"));
        }
        for (m, k) in maps.iter().zip(&masks) {
            if m.len() != block_ids.len() || m.iter().any(|a| a.dim() != k.dim()) {
                return Err(Error::contract("every image needs one map per block at mask size"));
            }
        }
        Ok(BlockScoreCache { block_ids, maps, masks })
    }

    /// Validation loss over all pixels of all images and its gradient with
    /// respect to the logits.
    pub fn loss_and_grad(&self, logits: &[f64]) -> (f64, Vec<f64>) {
        let w = softmax(logits);
        let n_blocks = w.len();
        let per_image = exec::map_range(self.maps.len(), |i| {
            let maps = &self.maps[i];
            let mask = &self.masks[i];
            let mut loss = 0.0;
            let mut dw = vec![0.0; n_blocks];
            for (p, &y) in mask.indexed_iter() {
                let f: f64 = maps.iter().zip(&w).map(|(m, wi)| wi * m[p]).sum();
                loss += bce(f, y);
                if f > CE_CLAMP && f < 1.0 - CE_CLAMP {
                    let df = if y { -1.0 / f } else { 1.0 / (1.0 - f) };
                    for (k, m) in maps.iter().enumerate() {
                        dw[k] += df * m[p];
                    }
                }
            }
            (loss, dw, mask.len())
        });
        let mut loss = 0.0;
        let mut dw = vec![0.0; n_blocks];
        let mut pixels = 0usize;
        for (l, g, n) in per_image {
            loss += l;
            for (a, b) in dw.iter_mut().zip(g) {
                *a += b;
            }
            pixels += n;
        }
        let n = pixels as f64;
        loss /= n;
        dw.iter_mut().for_each(|g| *g /= n);
        let mean: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        let grad = w.iter().zip(&dw).map(|(wj, gj)| wj * (gj - mean)).collect();
        (loss, grad)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    /// Number of blocks kept after the search.
    pub k: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            learning_rate: 0.1,
            iterations: 500,
            k: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub logits: WeightLogits,
    /// Loss before each update plus the final loss (`iterations + 1` entries).
    pub loss_trace: Vec<f64>,
}

impl SearchOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.loss_trace[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("trace is never empty")
    }
}

/// Runs `iterations` plain gradient-descent updates from `start`.
pub fn descend(cache: &BlockScoreCache, start: WeightLogits, config: &SearchConfig) -> Result<SearchOutcome> {
    if start.values.len() != cache.block_ids.len() {
        return Err(Error::contract(format!(
            "{} logits for {} cached blocks",
            start.values.len(),
            cache.block_ids.len()
        )));
    }
    let mut logits = start;
    logits.learning_rate = config.learning_rate;
    let mut trace = Vec::with_capacity(config.iterations + 1);
    for m in 0..config.iterations {
        let (loss, grad) = cache.loss_and_grad(&logits.values);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite validation loss at search iteration {m}"
            )));
        }
        trace.push(loss);
        for (v, g) in logits.values.iter_mut().zip(grad) {
            *v -= config.learning_rate * g;
        }
        logits.iteration += 1;
    }
    let (loss, _) = cache.loss_and_grad(&logits.values);
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite validation loss after search".into()));
    }
    trace.push(loss);
    Ok(SearchOutcome {
        logits,
        loss_trace: trace,
    })
}

/// Caches the validation block maps and optimizes the fusion logits,
/// starting from uniform weights.
pub fn search_weights(
    banks: &[ScaleBank],
    teacher: &TeacherNetwork,
    val: &[ValidationSample],
    reference: ReferenceSize,
    config: &SearchConfig,
    epsilon: f64,
) -> Result<SearchOutcome> {
    let cache = BlockScoreCache::build(banks, teacher, val, reference, epsilon)?;
    let start = WeightLogits::uniform(cache.block_ids.clone(), config.learning_rate);
    descend(&cache, start, config)
}

/// Keeps the `k` highest-weight blocks (ties go to the lower block id) and
/// renormalizes their weights. The kept list is in block-id order.
pub fn prune_top_k(logits: &WeightLogits, k: usize) -> Result<(Vec<BlockId>, WeightVector)> {
    let n = logits.values.len();
    if k == 0 || k > n {
        return Err(Error::contract(format!("k must be in 1..={n}, got {k}")));
    }
    let w = softmax_weights(logits);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        w.values[b]
            .total_cmp(&w.values[a])
            .then(logits.block_ids[a].cmp(&logits.block_ids[b]))
    });
    let mut kept: Vec<usize> = order[..k].to_vec();
    kept.sort_by_key(|&i| logits.block_ids[i]);
    let sum: f64 = kept.iter().map(|&i| w.values[i]).sum();
    let ids: Vec<BlockId> = kept.iter().map(|&i| logits.block_ids[i]).collect();
    let values = if k == n {
        kept.iter().map(|&i| w.values[i]).collect()
    } else {
        kept.iter().map(|&i| w.values[i] / sum).collect()
    };
    Ok((
        ids.clone(),
        WeightVector {
            values,
            block_ids: ids,
        },
    ))
}

/// Contents of a `weights.txt` file.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightFile {
    pub fingerprint: Option<String>,
    pub logits: WeightLogits,
    pub kept: Vec<bool>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

impl WeightFile {
    pub fn kept_ids(&self) -> Vec<BlockId> {
        self.logits
            .block_ids
            .iter()
            .zip(&self.kept)
            .filter(|(_, &k)| k)
            .map(|(id, _)| *id)
            .collect()
    }

    /// Renormalized weights over the kept blocks.
    pub fn kept_weights(&self) -> Result<WeightVector> {
        let k = self.kept.iter().filter(|&&k| k).count();
        let (ids, w) = prune_top_k(&self.logits, k)?;
        if ids != self.kept_ids() {
            return Err(Error::Config(
                "kept flags in the weight file disagree with the top-k logits".into(),
            ));
        }
        Ok(w)
    }

    pub fn render(&self) -> String {
        let w = softmax_weights(&self.logits);
        let mut s = String::new();
        let _ = writeln!(s, "# featimit-weights v{WEIGHT_FILE_VERSION}");
        if let Some(fp) = &self.fingerprint {
            let _ = writeln!(s, "# fingerprint {fp}");
        }
        let _ = writeln!(
            s,
            "# iterations {} learning_rate {}",
            self.logits.iteration, self.logits.learning_rate
        );
        if let (Some(a), Some(b)) = (self.initial_loss, self.final_loss) {
            let _ = writeln!(s, "# val_loss initial {a:.12e} final {b:.12e}");
        }
        let _ = writeln!(s, "scale\tlevel\tlogit\tweight\tkept");
        for (i, id) in self.logits.block_ids.iter().enumerate() {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.17e}\t{:.12}\t{}",
                id.scale,
                id.level,
                self.logits.values[i],
                w.values[i],
                u8::from(self.kept[i])
            );
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Config(format!("weight file: {m}"));
        let mut lines = text.lines();
        let first = lines.next().unwrap_or_default();
        let version = first
            .strip_prefix("# featimit-weights v")
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| bad(format!("missing version header, found `{first}`")))?;
        if version != WEIGHT_FILE_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut out = WeightFile {
            fingerprint: None,
            logits: WeightLogits::uniform(Vec::new(), 0.0),
            kept: Vec::new(),
            initial_loss: None,
            final_loss: None,
        };
        for line in lines {
            if let Some(rest) = line.strip_prefix("# fingerprint ") {
                out.fingerprint = Some(rest.trim().to_string());
            } else if let Some(rest) = line.strip_prefix("# iterations ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if let [it, "learning_rate", lr] = parts[..] {
                    out.logits.iteration = it.parse().map_err(|_| bad(line.into()))?;
                    out.logits.learning_rate = lr.parse().map_err(|_| bad(line.into()))?;
                }
            } else if let Some(rest) = line.strip_prefix("# val_loss ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if let ["initial", a, "final", b] = parts[..] {
                    out.initial_loss = a.parse().ok();
                    out.final_loss = b.parse().ok();
                }
            } else if line.starts_with('#') || line.starts_with("scale") || line.trim().is_empty() {
                continue;
            } else {
                let cols: Vec<&str> = line.split('\t').collect();
                if cols.len() != 5 {
                    return Err(bad(format!("expected 5 columns: `{line}`")));
                }
                let parse_usize = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad integer `{s}`")));
                let id = BlockId {
                    scale: parse_usize(cols[0])?,
                    level: parse_usize(cols[1])?,
                };
                let logit: f64 = cols[2].parse().map_err(|_| bad(format!("bad logit `{}`", cols[2])))?;
                out.logits.block_ids.push(id);
                out.logits.values.push(logit);
                out.kept.push(cols[4].trim() == "1");
            }
        }
        if out.logits.values.is_empty() {
            return Err(bad("no blocks listed".into()));
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
