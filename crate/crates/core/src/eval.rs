//! Heatmap decoding and PCK metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::HeatmapStack;
use crate::pose::{JointSchema, Keypoint, REPORT_COLUMNS};

/// Grid argmax per map (first occurrence in row-major order wins ties),
/// moved a quarter heatmap pixel toward the highest 4-neighbour when that
/// neighbour is the unique maximum among the in-bounds neighbours, then
/// scaled to input pixels.
pub fn argmax_decode(heatmaps: &HeatmapStack) -> Result<Vec<(f64, f64)>> {
    let (w, h) = (heatmaps.width, heatmaps.height);
    if w == 0 || h == 0 {
        return Err(Error::Domain("cannot decode empty heatmaps".into()));
    }
    let stride = heatmaps.stride as f64;
    Ok((0..heatmaps.k)
        .map(|j| {
            let map = heatmaps.map(j);
            let mut best = 0;
            for (i, &v) in map.iter().enumerate() {
                if v > map[best] {
                    best = i;
                }
            }
            let (x, y) = (best % w, best / w);
            let mut nb: Vec<(f64, f64, f64)> = Vec::with_capacity(4);
            if y > 0 {
                nb.push((map[best - w], 0.0, -1.0));
            }
            if x > 0 {
                nb.push((map[best - 1], -1.0, 0.0));
            }
            if x + 1 < w {
                nb.push((map[best + 1], 1.0, 0.0));
            }
            if y + 1 < h {
                nb.push((map[best + w], 0.0, 1.0));
            }
            let (mut fx, mut fy) = (x as f64, y as f64);
            if let Some(top) = nb.iter().copied().reduce(|a, b| if b.0 > a.0 { b } else { a }) {
                if nb.iter().filter(|n| n.0 == top.0).count() == 1 {
                    fx += 0.25 * top.1;
                    fy += 0.25 * top.2;
                }
            }
            (fx * stride, fy * stride)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckReport {
    /// Percentage per joint; `None` when no pair of that joint was evaluated.
    pub per_joint: Vec<Option<f64>>,
    /// Percentage per report column, pooled over the schema's joints.
    pub columns: Vec<Option<f64>>,
    pub total: f64,
    pub threshold: f64,
    pub evaluated: usize,
    pub correct: usize,
}

impl PckReport {
    /// Fixed-width table with the conventional column order and `-` for
    /// empty columns.
    pub fn table(&self) -> String {
        let mut s = String::new();
        for c in REPORT_COLUMNS.iter().chain(std::iter::once(&"Total")) {
            let _ = write!(s, "{c:>7}");
        }
        s.push('\n');
        for v in &self.columns {
            match v {
                Some(p) => {
                    let _ = write!(s, "{p:>7.1}");
                }
                None => {
                    let _ = write!(s, "{:>7}", "-");
                }
            }
        }
        let _ = writeln!(s, "{:>7.1}", self.total);
        s
    }
}

/// Fraction of evaluated `(instance, joint)` pairs whose prediction lies
/// within `threshold * normalizer` of the ground truth (boundary counts as
/// correct). By default a pair is evaluated when the joint is annotated;
/// `eval_mask` restricts this further.
pub fn pck(
    preds: &[Vec<(f64, f64)>],
    gts: &[Vec<Keypoint>],
    normalizers: &[f64],
    threshold: f64,
    eval_mask: Option<&[Vec<bool>]>,
    schema: &JointSchema,
) -> Result<PckReport> {
    let n = gts.len();
    if preds.len() != n || normalizers.len() != n || eval_mask.is_some_and(|m| m.len() != n) {
        return Err(Error::Domain(format!(
            "pck inputs disagree on instance count: {} predictions, {n} ground truths, {} normalizers",
            preds.len(),
            normalizers.len()
        )));
    }
    let k = schema.len();
    let mut hit = vec![0usize; k];
    let mut seen = vec![0usize; k];
    for i in 0..n {
        let norm = normalizers[i];
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Domain(format!("instance {i} has normalizer {norm}")));
        }
        if preds[i].len() != k || gts[i].len() != k || eval_mask.is_some_and(|m| m[i].len() != k) {
            return Err(Error::Domain(format!("instance {i} does not have {k} joints")));
        }
        for j in 0..k {
            let g = &gts[i][j];
            if !g.annotated || eval_mask.is_some_and(|m| !m[i][j]) {
                continue;
            }
            seen[j] += 1;
            let (px, py) = preds[i][j];
            let d = ((px - g.x).powi(2) + (py - g.y).powi(2)).sqrt();
            if d / norm <= threshold {
                hit[j] += 1;
            }
        }
    }
    let evaluated: usize = seen.iter().sum();
    if evaluated == 0 {
        return Err(Error::Domain("no joints evaluated".into()));
    }
    let correct: usize = hit.iter().sum();
    let pct = |h: usize, s: usize| if s == 0 { None } else { Some(100.0 * h as f64 / s as f64) };
    let per_joint = (0..k).map(|j| pct(hit[j], seen[j])).collect();
    let columns = (0..REPORT_COLUMNS.len())
        .map(|c| {
            let (mut h, mut s) = (0, 0);
            for j in 0..k {
                if schema.columns[j] == Some(c) {
                    h += hit[j];
                    s += seen[j];
                }
            }
            pct(h, s)
        })
        .collect();
    Ok(PckReport {
        per_joint,
        columns,
        total: 100.0 * correct as f64 / evaluated as f64,
        threshold,
        evaluated,
        correct,
    })
}
