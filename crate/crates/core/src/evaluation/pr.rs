//! Pixel-level precision/recall curves and their area.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images with at most this many pixels also use every distinct probability
/// as a threshold.
pub const DISTINCT_THRESHOLD_LIMIT: usize = 4096;

/// Number of evenly spaced thresholds in `[0, 1]`.
pub const GRID_THRESHOLDS: usize = 201;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    /// Absent for vertically averaged points.
    pub threshold: Option<f64>,
    pub precision: f64,
    pub recall: f64,
}

/// Points in descending threshold order. `auc` integrates precision over
/// recall with the trapezoid rule, starting from (recall 0, precision 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub auc: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrAveraging {
    /// Mean interpolated precision on a fixed recall grid.
    #[default]
    Vertical,
    /// Mean precision and recall at each shared threshold.
    Threshold,
}

/// The 201-point grid, plus every distinct value of `probs` when there are
/// few enough of them, in descending order.
pub fn default_thresholds(probs: &[f32]) -> Vec<f64> {
    let mut t: Vec<f64> = (0..GRID_THRESHOLDS)
        .map(|i| i as f64 / (GRID_THRESHOLDS - 1) as f64)
        .collect();
    if probs.len() <= DISTINCT_THRESHOLD_LIMIT {
        t.extend(probs.iter().map(|&p| p as f64));
    }
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

fn trapezoid(points: &[(f64, f64)]) -> f64 {
    let mut area = 0.0;
    let mut prev = (0.0, 1.0);
    for &(r, p) in points {
        area += (r - prev.0) * (p + prev.1) / 2.0;
        prev = (r, p);
    }
    area
}

/// Curve over all pixels of several images. Positives are `probs >= t`.
pub fn pr_curve_pooled(pairs: &[(&Tensor<f32>, &Tensor<f32>)], thresholds: Option<&[f64]>) -> Result<PrCurve> {
    let mut scored: Vec<(f32, bool)> = Vec::new();
    for (probs, gt) in pairs {
        if probs.shape() != gt.shape() {
            return Err(Error::shape("pr_curve", probs.shape(), gt.shape()));
        }
        if let Some(&p) = probs.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
        }
        scored.extend(probs.data().iter().zip(gt.data()).map(|(&p, &g)| (p, g >= 0.5)));
    }
    let positives = scored.iter().filter(|s| s.1).count() as u64;
    if positives == 0 {
        return Err(Error::InvalidArgument("PR curve needs a non-empty ground truth".into()));
    }
    let owned;
    let thresholds = match thresholds {
        Some(t) => t,
        None => {
            let probs: Vec<f32> = scored.iter().map(|s| s.0).collect();
            owned = default_thresholds(&probs);
            &owned
        }
    };
    if thresholds.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::InvalidArgument("thresholds must be descending".into()));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp, mut next) = (0u64, 0u64, 0usize);
    let mut points = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        while next < scored.len() && scored[next].0 as f64 >= t {
            if scored[next].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            next += 1;
        }
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        points.push(PrPoint {
            threshold: Some(t),
            precision,
            recall: tp as f64 / positives as f64,
        });
    }
    let auc = trapezoid(&points.iter().map(|p| (p.recall, p.precision)).collect::<Vec<_>>());
    Ok(PrCurve { points, auc })
}

pub fn pr_curve(probs: &Tensor<f32>, gt: &Tensor<f32>, thresholds: Option<&[f64]>) -> Result<PrCurve> {
    pr_curve_pooled(&[(probs, gt)], thresholds)
}

/// Highest precision among points with recall at least `r`.
fn interpolated_precision(curve: &PrCurve, r: f64) -> f64 {
    let anchor = if r <= 0.0 { 1.0 } else { 0.0 };
    curve
        .points
        .iter()
        .filter(|p| p.recall >= r)
        .map(|p| p.precision)
        .fold(anchor, f64::max)
}

/// Averages per-fold curves. Vertical averaging samples 101 recall levels;
/// threshold averaging uses the thresholds common to every curve.
pub fn average_pr_curves(curves: &[PrCurve], mode: PrAveraging) -> Result<PrCurve> {
    if curves.is_empty() {
        return Err(Error::InvalidArgument("no curves to average".into()));
    }
    let n = curves.len() as f64;
    let points: Vec<PrPoint> = match mode {
        PrAveraging::Vertical => (0..=100)
            .map(|i| {
                let r = i as f64 / 100.0;
                PrPoint {
                    threshold: None,
                    recall: r,
                    precision: curves.iter().map(|c| interpolated_precision(c, r)).sum::<f64>() / n,
                }
            })
            .collect(),
        PrAveraging::Threshold => {
            let mut out = Vec::new();
            for p0 in &curves[0].points {
                let matched: Vec<&PrPoint> = curves
                    .iter()
                    .filter_map(|c| c.points.iter().find(|p| p.threshold == p0.threshold))
                    .collect();
                if matched.len() == curves.len() {
                    out.push(PrPoint {
                        threshold: p0.threshold,
                        precision: matched.iter().map(|p| p.precision).sum::<f64>() / n,
                        recall: matched.iter().map(|p| p.recall).sum::<f64>() / n,
                    });
                }
            }
            out
        }
    };
    let mut ordered: Vec<(f64, f64)> = points.iter().map(|p| (p.recall, p.precision)).collect();
    ordered.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let auc = trapezoid(&ordered);
    Ok(PrCurve { points, auc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f32]) -> Tensor<f32> {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    /// Every distinct score as a threshold, counted naively.
    fn brute_auc(probs: &[f32], labels: &[f32]) -> f64 {
        let mut ts: Vec<f32> = probs.to_vec();
        ts.sort_by(|a, b| b.total_cmp(a));
        ts.dedup();
        let pos = labels.iter().filter(|&&l| l == 1.0).count() as f64;
        let mut area = 0.0;
        let (mut r0, mut p0) = (0.0, 1.0);
        for th in ts {
            let tp = probs.iter().zip(labels).filter(|(&p, &l)| p >= th && l == 1.0).count() as f64;
            let all = probs.iter().filter(|&&p| p >= th).count() as f64;
            let (r, p) = (tp / pos, tp / all);
            area += (r - r0) * (p + p0) / 2.0;
            r0 = r;
            p0 = p;
        }
        area
    }

    #[test]
    fn perfect_scores() {
        let gt = t(&[1.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(pr_curve(&gt, &gt, None).unwrap().auc, 1.0);
    }

    #[test]
    fn small_fixture_matches_brute_force() {
        let p = [0.9, 0.8, 0.4, 0.2];
        let l = [1.0, 1.0, 0.0, 1.0];
        let got = pr_curve(&t(&p), &t(&l), None).unwrap().auc;
        let want = brute_auc(&p, &l);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        // Hand computation: (0,1) (1/3,1) (2/3,1) (2/3,2/3) (1,3/4).
        let hand = 2.0 / 3.0 + (1.0 / 3.0) * (2.0 / 3.0 + 0.75) / 2.0;
        assert!((got - hand).abs() < 1e-12);
    }

    #[test]
    fn empty_truth_is_error() {
        assert!(pr_curve(&t(&[0.2, 0.3]), &t(&[0.0, 0.0]), None).is_err());
    }

    #[test]
    fn averaging_identical_curves_is_identity_auc() {
        let c = pr_curve(&t(&[0.9, 0.1, 0.7, 0.3]), &t(&[1.0, 0.0, 0.0, 1.0]), None).unwrap();
        let v = average_pr_curves(&[c.clone(), c.clone()], PrAveraging::Threshold).unwrap();
        assert!((v.auc - c.auc).abs() < 1e-12);
        let v = average_pr_curves(&[c.clone(), c], PrAveraging::Vertical).unwrap();
        assert!(v.auc > 0.0 && v.auc <= 1.0);
    }

    proptest! {
        #[test]
        fn matches_brute_force(vals in proptest::collection::vec((0u8..=20, any::<bool>()), 2..60)) {
            prop_assume!(vals.iter().any(|v| v.1));
            let p: Vec<f32> = vals.iter().map(|v| v.0 as f32 / 20.0).collect();
            let l: Vec<f32> = vals.iter().map(|v| v.1 as u8 as f32).collect();
            let got = pr_curve(&t(&p), &t(&l), None).unwrap().auc;
            prop_assert!((got - brute_auc(&p, &l)).abs() < 1e-10);
        }

        #[test]
        fn invariant_under_monotone_transform(vals in proptest::collection::vec((0u8..=20, any::<bool>()), 2..60)) {
            prop_assume!(vals.iter().any(|v| v.1));
            let p: Vec<f32> = vals.iter().map(|v| v.0 as f32 / 20.0).collect();
            let q: Vec<f32> = vals.iter().map(|v| (v.0 as f32 / 20.0).powi(3) * 0.9 + 0.05).collect();
            let l: Vec<f32> = vals.iter().map(|v| v.1 as u8 as f32).collect();
            let a = pr_curve(&t(&p), &t(&l), None).unwrap().auc;
            let b = pr_curve(&t(&q), &t(&l), None).unwrap().auc;
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
