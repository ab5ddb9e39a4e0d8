//! Pixel-level and lesion-level segmentation metrics.

mod pr;
mod report;

pub use pr::{average_pr_curves, default_thresholds, pr_curve, pr_curve_pooled, PrAveraging, PrCurve, PrPoint};
pub use report::{
    evaluate_predictions, overlay, write_pr_csv, EvalReport, ImageEval, ImageMasks, TaskAggregate, TaskEval,
    CONTEXT_OD_AUC,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default lesion overlap factor.
pub const DEFAULT_SIGMA: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Pixel,
    Lesion,
}

/// Detection counts. At lesion level `tn` is absent, `tp` counts matched
/// predicted components and `gt_detected` counts ground-truth components
/// reached by the prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub level: Level,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tn: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gt_detected: Option<u64>,
}

/// `num / den`, or 1 when both are zero.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub sensitivity: f64,
    pub precision: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub specificity: Option<f64>,
}

impl ConfusionCounts {
    pub fn empty(level: Level) -> Self {
        ConfusionCounts {
            level,
            tp: 0,
            fp: 0,
            fn_: 0,
            tn: (level == Level::Pixel).then_some(0),
            gt_detected: (level == Level::Lesion).then_some(0),
        }
    }

    /// Adds counts of the same level.
    pub fn merge(&self, other: &ConfusionCounts) -> Result<ConfusionCounts> {
        if self.level != other.level {
            return Err(Error::InvalidArgument("cannot merge pixel and lesion counts".into()));
        }
        let add = |a: Option<u64>, b: Option<u64>| a.zip(b).map(|(a, b)| a + b);
        Ok(ConfusionCounts {
            level: self.level,
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: add(self.tn, other.tn),
            gt_detected: add(self.gt_detected, other.gt_detected),
        })
    }

    pub fn sensitivity(&self) -> f64 {
        match self.gt_detected {
            Some(d) => ratio(d, d + self.fn_),
            None => ratio(self.tp, self.tp + self.fn_),
        }
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// Pixel level: `2 TP / (2 TP + FP + FN)`. Lesion level: harmonic mean
    /// of sensitivity and precision.
    pub fn f1(&self) -> f64 {
        match self.level {
            Level::Pixel => ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_),
            Level::Lesion => {
                let (se, p) = (self.sensitivity(), self.precision());
                if se + p == 0.0 {
                    0.0
                } else {
                    2.0 * se * p / (se + p)
                }
            }
        }
    }

    pub fn accuracy(&self) -> Option<f64> {
        self.tn
            .map(|tn| ratio(self.tp + tn, self.tp + tn + self.fp + self.fn_))
    }

    pub fn specificity(&self) -> Option<f64> {
        self.tn.map(|tn| ratio(tn, tn + self.fp))
    }

    pub fn rates(&self) -> Rates {
        Rates {
            sensitivity: self.sensitivity(),
            precision: self.precision(),
            f1: self.f1(),
            accuracy: self.accuracy(),
            specificity: self.specificity(),
        }
    }
}

fn plane(mask: &Tensor<f32>) -> Result<(usize, usize)> {
    match *mask.shape() {
        [h, w] => Ok((h, w)),
        _ => Err(Error::InvalidArgument(format!("mask must be H x W, got {:?}", mask.shape()))),
    }
}

fn same_extent(op: &'static str, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    plane(a)?;
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn is_fg(v: f32) -> bool {
    v >= 0.5
}

/// Pixel confusion counts of a binary prediction against a binary truth.
pub fn pixel_metrics(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<ConfusionCounts> {
    same_extent("pixel_metrics", pred, gt)?;
    let mut c = ConfusionCounts::empty(Level::Pixel);
    let mut tn = 0;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (is_fg(p), is_fg(g)) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    c.tn = Some(tn);
    Ok(c)
}

/// 8-connected components of a binary mask. Components are ordered by their
/// first pixel in row-major order; pixels are flat row-major indices in
/// ascending order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LesionSet {
    pub height: usize,
    pub width: usize,
    pub components: Vec<Vec<usize>>,
}

impl LesionSet {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Union of all components as a flat membership table.
    pub fn union(&self) -> Vec<bool> {
        let mut m = vec![false; self.height * self.width];
        for c in &self.components {
            for &i in c {
                m[i] = true;
            }
        }
        m
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

pub fn connected_components(mask: &Tensor<f32>) -> Result<LesionSet> {
    let (h, w) = plane(mask)?;
    let fg: Vec<bool> = mask.data().iter().map(|&v| is_fg(v)).collect();
    let mut parent: Vec<usize> = (0..h * w).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !fg[i] {
                continue;
            }
            // Already-visited neighbours: W, NW, N, NE.
            let mut link = |j: usize| {
                if fg[j] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            };
            if x > 0 {
                link(i - 1);
            }
            if y > 0 {
                link(i - w);
                if x > 0 {
                    link(i - w - 1);
                }
                if x + 1 < w {
                    link(i - w + 1);
                }
            }
        }
    }
    let mut slot = vec![usize::MAX; h * w];
    let mut components: Vec<Vec<usize>> = Vec::new();
    for i in 0..h * w {
        if fg[i] {
            let r = find(&mut parent, i);
            if slot[r] == usize::MAX {
                slot[r] = components.len();
                components.push(Vec::new());
            }
            components[slot[r]].push(i);
        }
    }
    Ok(LesionSet {
        height: h,
        width: w,
        components,
    })
}

fn covered(component: &[usize], other: &[bool], sigma: f64) -> bool {
    let hit = component.iter().filter(|&&i| other[i]).count();
    hit as f64 >= sigma * component.len() as f64
}

/// Lesion-level matching. A predicted component counts as TP when at least
/// `sigma` of its pixels lie inside the ground-truth union, otherwise FP. A
/// ground-truth component is detected when at least `sigma` of its pixels lie
/// inside the predicted union, otherwise FN.
pub fn lesion_match(pred: &LesionSet, gt: &LesionSet, sigma: f64) -> Result<ConfusionCounts> {
    if !(sigma > 0.0 && sigma <= 1.0) {
        return Err(Error::InvalidArgument(format!("sigma {sigma} outside (0, 1]")));
    }
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape("lesion_match", &[pred.height, pred.width], &[gt.height, gt.width]));
    }
    let gt_union = gt.union();
    let pred_union = pred.union();
    let tp = pred.components.iter().filter(|c| covered(c, &gt_union, sigma)).count() as u64;
    let detected = gt.components.iter().filter(|c| covered(c, &pred_union, sigma)).count() as u64;
    Ok(ConfusionCounts {
        level: Level::Lesion,
        tp,
        fp: pred.len() as u64 - tp,
        fn_: gt.len() as u64 - detected,
        tn: None,
        gt_detected: Some(detected),
    })
}

/// Components of both masks, then [`lesion_match`].
pub fn lesion_metrics(pred: &Tensor<f32>, gt: &Tensor<f32>, sigma: f64) -> Result<ConfusionCounts> {
    same_extent("lesion_metrics", pred, gt)?;
    lesion_match(&connected_components(pred)?, &connected_components(gt)?, sigma)
}

/// Jaccard index `|P ∩ G| / |P ∪ G|`.
pub fn overlap_eta(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    same_extent("overlap_eta", pred, gt)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (is_fg(p), is_fg(g));
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    if union == 0 {
        return Err(Error::InvalidArgument("overlap of two empty masks is undefined".into()));
    }
    Ok(inter as f64 / union as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Tensor<f32> {
        let mut t = Tensor::zeros(&[h, w]);
        for &(y, x) in on {
            t.data_mut()[y * w + x] = 1.0;
        }
        t
    }

    fn rect(h: usize, w: usize, y0: usize, x0: usize, rh: usize, rw: usize) -> Tensor<f32> {
        Tensor::from_fn(&[h, w], |i| {
            let (y, x) = (i / w, i % w);
            if (y0..y0 + rh).contains(&y) && (x0..x0 + rw).contains(&x) {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn pixel_metric_examples() {
        let gt = rect(8, 8, 2, 2, 3, 3);
        let c = pixel_metrics(&gt, &gt).unwrap();
        assert_eq!(c.f1(), 1.0);
        assert_eq!(c.accuracy(), Some(1.0));
        let c = pixel_metrics(&Tensor::zeros(&[8, 8]), &gt).unwrap();
        assert_eq!(c.sensitivity(), 0.0);
        assert_eq!(c.f1(), 0.0);
        let c = ConfusionCounts {
            tp: 8,
            fp: 2,
            fn_: 4,
            tn: Some(0),
            ..ConfusionCounts::empty(Level::Pixel)
        };
        assert!((c.f1() - 16.0 / 22.0).abs() < 1e-15);
        assert!(pixel_metrics(&gt, &Tensor::zeros(&[8, 9])).is_err());
    }

    #[test]
    fn components_examples() {
        assert!(connected_components(&Tensor::zeros(&[4, 4])).unwrap().is_empty());
        let diag = mask(3, 3, &[(0, 0), (1, 1)]);
        assert_eq!(connected_components(&diag).unwrap().len(), 1);
        let two = mask(3, 3, &[(0, 0), (2, 2)]);
        assert_eq!(connected_components(&two).unwrap().len(), 2);
    }

    #[test]
    fn lesion_examples() {
        let gt = rect(20, 20, 0, 0, 2, 2)
            .data()
            .iter()
            .zip(rect(20, 20, 10, 10, 3, 3).data())
            .zip(rect(20, 20, 15, 0, 2, 4).data())
            .map(|((a, b), c)| a.max(*b).max(*c))
            .collect::<Vec<_>>();
        let gt = Tensor::new(vec![20, 20], gt).unwrap();
        let c = lesion_metrics(&gt, &gt, 0.2).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (3, 0, 0));

        let two = rect(20, 20, 0, 0, 2, 2).data().iter().zip(rect(20, 20, 10, 10, 2, 2).data()).map(|(a, b)| a.max(*b)).collect();
        let two = Tensor::new(vec![20, 20], two).unwrap();
        let c = lesion_metrics(&Tensor::zeros(&[20, 20]), &two, 0.2).unwrap();
        assert_eq!(c.fn_, 2);
        assert_eq!(c.sensitivity(), 0.0);
    }

    #[test]
    fn lesion_overlap_threshold() {
        // 10-pixel predicted row, ground truth a 10-pixel row touching it in
        // 1 pixel, then in 3 pixels.
        let pred = rect(4, 30, 1, 0, 1, 10);
        let gt1 = rect(4, 30, 1, 9, 1, 10);
        let c = lesion_metrics(&pred, &gt1, 0.2).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (0, 1, 1));
        let gt3 = rect(4, 30, 1, 7, 1, 10);
        let c = lesion_metrics(&pred, &gt3, 0.2).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (1, 0, 0));
    }

    #[test]
    fn eta_examples() {
        let a = rect(20, 30, 5, 5, 10, 10);
        let b = rect(20, 30, 5, 10, 10, 10);
        assert_eq!(overlap_eta(&a, &b).unwrap(), 1.0 / 3.0);
        assert_eq!(overlap_eta(&a, &a).unwrap(), 1.0);
        assert_eq!(overlap_eta(&a, &rect(20, 30, 0, 20, 3, 3)).unwrap(), 0.0);
        assert!(overlap_eta(&Tensor::zeros(&[4, 4]), &Tensor::zeros(&[4, 4])).is_err());
    }

    #[test]
    fn counts_serialize_without_lesion_tn() {
        let c = ConfusionCounts::empty(Level::Lesion);
        let s = serde_json::to_string(&c).unwrap();
        assert!(!s.contains("tn"));
        assert!(s.contains("\"fn\""));
    }

    fn arb_mask() -> impl Strategy<Value = Tensor<f32>> {
        proptest::collection::vec(prop_oneof![3 => Just(0.0f32), 1 => Just(1.0f32)], 16 * 16)
            .prop_map(|d| Tensor::new(vec![16, 16], d).unwrap())
    }

    proptest! {
        #[test]
        fn f1_from_rates_matches_counts(p in arb_mask(), g in arb_mask()) {
            let c = pixel_metrics(&p, &g).unwrap();
            let (se, pr) = (c.sensitivity(), c.precision());
            let harmonic = if se + pr == 0.0 { 0.0 } else { 2.0 * se * pr / (se + pr) };
            if c.tp + c.fp > 0 && c.tp + c.fn_ > 0 {
                prop_assert!((harmonic - c.f1()).abs() <= 1e-12);
            }
        }

        #[test]
        fn jaccard_f1_identity(p in arb_mask(), g in arb_mask()) {
            prop_assume!(p.data().iter().chain(g.data()).any(|&v| v == 1.0));
            let f1 = pixel_metrics(&p, &g).unwrap().f1();
            let eta = overlap_eta(&p, &g).unwrap();
            prop_assert!((eta - f1 / (2.0 - f1)).abs() <= 1e-12);
        }

        #[test]
        fn raising_sigma_never_adds_tp(p in arb_mask(), g in arb_mask(), s1 in 0.01f64..1.0, s2 in 0.01f64..1.0) {
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            let (pc, gc) = (connected_components(&p).unwrap(), connected_components(&g).unwrap());
            let a = lesion_match(&pc, &gc, lo).unwrap();
            let b = lesion_match(&pc, &gc, hi).unwrap();
            prop_assert!(b.tp <= a.tp);
            prop_assert!(b.gt_detected <= a.gt_detected);
        }

        #[test]
        fn components_partition_foreground(p in arb_mask()) {
            let set = connected_components(&p).unwrap();
            let mut seen = vec![0u8; 256];
            for c in &set.components {
                for &i in c { seen[i] += 1; }
            }
            for (i, &v) in p.data().iter().enumerate() {
                prop_assert_eq!(seen[i], (v == 1.0) as u8);
            }
        }
    }
}
