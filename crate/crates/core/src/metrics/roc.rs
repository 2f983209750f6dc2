use crate::error::{Error, Result};

/// Pixel AUROC via the Mann-Whitney statistic with midranks for ties, i.e.
/// `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Numerical(format!("score {i} is NaN")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::contract("AUROC needs both normal and anomalous pixels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share the midrank (i + 1 + j) / 2.
        let mid = (i + 1 + j) as f64 / 2.0;
        let hits = order[i..j].iter().filter(|&&k| labels[k]).count();
        rank_sum += mid * hits as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}
