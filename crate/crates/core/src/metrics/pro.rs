use std::collections::VecDeque;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::exec;

/// 8-connected labelling. Labels run `1..=count` in row-major order of each
/// region's first pixel; `0` is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Components {
    pub labels: Array2<u32>,
    pub count: usize,
}

impl Components {
    /// Pixel coordinates of every region, indexed by `label - 1`.
    pub fn regions(&self) -> Vec<Vec<(usize, usize)>> {
        let mut out = vec![Vec::new(); self.count];
        for ((y, x), &l) in self.labels.indexed_iter() {
            if l > 0 {
                out[l as usize - 1].push((y, x));
            }
        }
        out
    }
}

pub fn connected_components(mask: &Array2<bool>) -> Components {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || labels[[y, x]] != 0 {
                continue;
            }
            count += 1;
            labels[[y, x]] = count;
            queue.push_back((y, x));
            while let Some((cy, cx)) = queue.pop_front() {
                for ny in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                    for nx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                        if mask[[ny, nx]] && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = count;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
        }
    }
    Components {
        labels,
        count: count as usize,
    }
}

/// One operating point of the threshold sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
    pub pro: f64,
}

/// Full threshold sweep; sorted by decreasing threshold, so `fpr`, `tpr`
/// and `pro` are all non-decreasing along the vector.
#[derive(Clone, Debug)]
pub struct PixelCurve {
    pub points: Vec<CurvePoint>,
    pub regions: usize,
}

fn count_at_least(sorted: &[f64], t: f64) -> usize {
    sorted.len() - sorted.partition_point(|&v| v < t)
}

/// Thresholds: every distinct score when there are at most `max` of them,
/// otherwise `max` distinct values spaced evenly by rank. Descending.
fn thresholds(all: &mut Vec<f64>, max: usize) -> Vec<f64> {
    all.sort_unstable_by(|a, b| b.total_cmp(a));
    all.dedup();
    if all.len() <= max || max < 2 {
        return all.clone();
    }
    let last = all.len() - 1;
    let mut out: Vec<f64> = (0..max)
        .map(|i| all[((i as f64 * last as f64) / (max - 1) as f64).round() as usize])
        .collect();
    out.dedup();
    out
}

pub fn pixel_curve(maps: &[Array2<f64>], masks: &[Array2<bool>], max_thresholds: usize) -> Result<PixelCurve> {
    if maps.len() != masks.len() {
        return Err(Error::contract(format!(
            "{} score maps but {} ground-truth masks",
            maps.len(),
            masks.len()
        )));
    }
    let mut normal = Vec::new();
    let mut anomalous = Vec::new();
    let mut regions: Vec<Vec<f64>> = Vec::new();
    for (i, (m, g)) in maps.iter().zip(masks).enumerate() {
        if m.dim() != g.dim() {
            return Err(Error::contract(format!(
                "image {i}: score map {:?} vs mask {:?}",
                m.dim(),
                g.dim()
            )));
        }
        if m.iter().any(|v| v.is_nan()) {
            return Err(Error::Numerical(format!("image {i}: score map contains NaN")));
        }
        for (&s, &a) in m.iter().zip(g.iter()) {
            if a {
                anomalous.push(s);
            } else {
                normal.push(s);
            }
        }
        for r in connected_components(g).regions() {
            let mut v: Vec<f64> = r.iter().map(|&p| m[p]).collect();
            v.sort_unstable_by(f64::total_cmp);
            regions.push(v);
        }
    }
    if anomalous.is_empty() {
        return Err(Error::contract("no anomalous pixels in the evaluated set"));
    }
    if normal.is_empty() {
        return Err(Error::contract("no normal pixels in the evaluated set"));
    }
    let mut all: Vec<f64> = normal.iter().chain(&anomalous).copied().collect();
    let ts = thresholds(&mut all, max_thresholds);
    normal.sort_unstable_by(f64::total_cmp);
    anomalous.sort_unstable_by(f64::total_cmp);
    let points = exec::map_slice(&ts, |&t| {
        let pro = regions
            .iter()
            .map(|r| count_at_least(r, t) as f64 / r.len() as f64)
            .sum::<f64>()
            / regions.len() as f64;
        CurvePoint {
            threshold: t,
            fpr: count_at_least(&normal, t) as f64 / normal.len() as f64,
            tpr: count_at_least(&anomalous, t) as f64 / anomalous.len() as f64,
            pro,
        }
    });
    Ok(PixelCurve {
        points,
        regions: regions.len(),
    })
}

/// Trapezoid area under `(x, y)` from `x = 0` to `limit`, with the last
/// segment cut at `limit` by linear interpolation. Points must be sorted by
/// non-decreasing `x`; the curve is anchored at `(0, 0)`.
pub fn partial_area(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    let (mut px, mut py) = (0.0, 0.0);
    for &(x, y) in points {
        if x >= limit {
            if x > px {
                let yl = py + (y - py) * (limit - px) / (x - px);
                area += (limit - px) * (py + yl) / 2.0;
            }
            return area;
        }
        area += (x - px) * (py + y) / 2.0;
        px = x;
        py = y;
    }
    // Curve ended before the limit: hold the last value.
    area + (limit - px) * py
}

/// Normalized area under the PRO-vs-FPR curve on `[0, fpr_limit]`.
pub fn aupro_from_curve(curve: &PixelCurve, fpr_limit: f64) -> f64 {
    let pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.fpr, p.pro)).collect();
    partial_area(&pts, fpr_limit) / fpr_limit
}

pub fn aupro(maps: &[Array2<f64>], masks: &[Array2<bool>], fpr_limit: f64, max_thresholds: usize) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::contract(format!("fpr limit must be in (0, 1], got {fpr_limit}")));
    }
    Ok(aupro_from_curve(&pixel_curve(maps, masks, max_thresholds)?, fpr_limit))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> Array2<bool> {
        let h = rows.len();
        let w = rows[0].len();
        Array2::from_shape_fn((h, w), |(y, x)| rows[y].as_bytes()[x] == b'#')
    }

    #[test]
    fn components_examples() {
        assert_eq!(connected_components(&mask(&["...", "..."])).count, 0);
        assert_eq!(connected_components(&mask(&["###", "###"])).count, 1);
        assert_eq!(connected_components(&mask(&["#.", ".#"])).count, 1);
        let c = connected_components(&mask(&["#..#", "....", ".##."]));
        assert_eq!(c.count, 3);
        assert_eq!(c.labels[[0, 0]], 1);
        assert_eq!(c.labels[[0, 3]], 2);
        assert_eq!(c.labels[[2, 1]], 3);
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let g = mask(&["##..", "##..", "....", "...#"]);
        let s = g.mapv(|b| if b { 1.0 } else { 0.0 });
        assert_eq!(aupro(&[s], &[g], 0.3, 5000).unwrap(), 1.0);
    }

    #[test]
    fn constant_scores_follow_the_diagonal() {
        let g = mask(&["##..", "##..", "....", "...."]);
        let s = Array2::from_elem((4, 4), 0.7);
        let v = aupro(&[s], &[g], 0.3, 5000).unwrap();
        assert!((v - 0.15).abs() < 1e-12, "{v}");
    }

    #[test]
    fn needs_an_anomalous_pixel() {
        let g = mask(&["..", ".."]);
        assert!(aupro(&[Array2::zeros((2, 2))], &[g], 0.3, 5000).is_err());
    }

    #[test]
    fn partial_area_interpolates_the_endpoint() {
        let a = partial_area(&[(0.0, 1.0), (1.0, 1.0)], 0.3);
        assert!((a - 0.3).abs() < 1e-15);
        let a = partial_area(&[(0.6, 0.6)], 0.3);
        assert!((a - 0.045).abs() < 1e-15);
    }

    #[test]
    fn threshold_subsampling_keeps_extremes() {
        let mut v: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let t = thresholds(&mut v, 10);
        assert_eq!(t.len(), 10);
        assert_eq!(t[0], 99.0);
        assert_eq!(*t.last().unwrap(), 0.0);
    }
}
