//! Per-image and aggregate evaluation reports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pr::{average_pr_curves, pr_curve, pr_curve_pooled, PrAveraging, PrCurve};
use super::{connected_components, lesion_match, overlap_eta, pixel_metrics, ConfusionCounts, Level, Rates};
use crate::error::{Error, Result};
use crate::models::Task;
use crate::tensor::Tensor;

/// Reference OD AUC values reported for W-net on e_ophtha and DiaRetDb1.
/// Context only; not reproducible without those datasets.
pub const CONTEXT_OD_AUC: [(&str, f64); 2] = [("e_ophtha", 0.9833), ("diaretdb1", 0.9921)];

/// One image's prediction and truth for one task.
#[derive(Clone, Debug)]
pub struct ImageMasks {
    pub id: String,
    pub fold: Option<usize>,
    pub task: Task,
    /// Binary prediction, `[H, W]`.
    pub pred: Tensor<f32>,
    /// Foreground probabilities, `[H, W]`, when available.
    pub probs: Option<Tensor<f32>>,
    pub gt: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub pixel: ConfusionCounts,
    pub pixel_rates: Rates,
    pub lesion: ConfusionCounts,
    pub lesion_rates: Rates,
    /// Region overlap; OD only and absent when both masks are empty.
    pub eta: Option<f64>,
    /// Absent without probabilities or with an empty ground truth.
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub id: String,
    pub fold: Option<usize>,
    pub tasks: BTreeMap<Task, TaskEval>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskAggregate {
    pub images: usize,
    pub pixel: ConfusionCounts,
    pub pixel_rates: Rates,
    pub lesion: ConfusionCounts,
    pub lesion_rates: Rates,
    /// Headline F1: lesion level for exudates, pixel level for the optic disc.
    pub task_f1: f64,
    pub mean_eta: Option<f64>,
    /// Area under the fold-averaged PR curve.
    pub auc: Option<f64>,
    pub fold_auc: BTreeMap<usize, f64>,
    pub pr: Option<PrCurve>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sigma: f64,
    pub pr_averaging: PrAveraging,
    pub images: Vec<ImageEval>,
    pub aggregate: BTreeMap<Task, TaskAggregate>,
    /// Published reference values, for context only.
    pub context_od_auc: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn task_f1(&self, task: Task) -> Option<f64> {
        self.aggregate.get(&task).map(|a| a.task_f1)
    }

    /// Mean headline F1 over the tasks present.
    pub fn mean_task_f1(&self) -> f64 {
        if self.aggregate.is_empty() {
            return 0.0;
        }
        self.aggregate.values().map(|a| a.task_f1).sum::<f64>() / self.aggregate.len() as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn headline_level(task: Task) -> Level {
    match task {
        Task::Ex => Level::Lesion,
        Task::Od => Level::Pixel,
    }
}

fn evaluate_one(m: &ImageMasks, sigma: f64) -> Result<TaskEval> {
    let pixel = pixel_metrics(&m.pred, &m.gt)?;
    let lesion = lesion_match(&connected_components(&m.pred)?, &connected_components(&m.gt)?, sigma)?;
    let eta = match m.task {
        Task::Od if pixel.tp + pixel.fp + pixel.fn_ > 0 => Some(overlap_eta(&m.pred, &m.gt)?),
        _ => None,
    };
    let has_truth = m.gt.data().iter().any(|&v| v >= 0.5);
    let auc = match &m.probs {
        Some(p) if has_truth => Some(pr_curve(p, &m.gt, None)?.auc),
        _ => None,
    };
    Ok(TaskEval {
        pixel_rates: pixel.rates(),
        pixel,
        lesion_rates: lesion.rates(),
        lesion,
        eta,
        auc,
    })
}

/// Sum of values in sorted order, so the result does not depend on input
/// order.
fn stable_mean(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

/// Evaluates every (image, task) entry. Aggregates sum counts over images;
/// PR curves pool the pixels of each fold and are then averaged over folds.
pub fn evaluate_predictions(items: &[ImageMasks], sigma: f64, averaging: PrAveraging) -> Result<EvalReport> {
    let mut images: BTreeMap<String, ImageEval> = BTreeMap::new();
    let mut by_task: BTreeMap<Task, Vec<(&ImageMasks, TaskEval)>> = BTreeMap::new();
    for m in items {
        let e = evaluate_one(m, sigma)?;
        let entry = images.entry(m.id.clone()).or_insert_with(|| ImageEval {
            id: m.id.clone(),
            fold: m.fold,
            tasks: BTreeMap::new(),
        });
        if entry.tasks.insert(m.task, e.clone()).is_some() {
            return Err(Error::DuplicateId(format!("{} ({})", m.id, m.task)));
        }
        by_task.entry(m.task).or_default().push((m, e));
    }

    let mut aggregate = BTreeMap::new();
    for (task, mut entries) in by_task {
        entries.sort_by(|a, b| a.0.id.cmp(&b.0.id));
        let mut pixel = ConfusionCounts::empty(Level::Pixel);
        let mut lesion = ConfusionCounts::empty(Level::Lesion);
        for (_, e) in &entries {
            pixel = pixel.merge(&e.pixel)?;
            lesion = lesion.merge(&e.lesion)?;
        }
        let mean_eta = stable_mean(entries.iter().filter_map(|(_, e)| e.eta).collect());

        let mut folds: BTreeMap<usize, Vec<(&Tensor<f32>, &Tensor<f32>)>> = BTreeMap::new();
        let all_probs = entries.iter().all(|(m, _)| m.probs.is_some());
        if all_probs {
            for (m, _) in &entries {
                let probs = m.probs.as_ref().expect("checked");
                folds.entry(m.fold.unwrap_or(0)).or_default().push((probs, &m.gt));
            }
        }
        let mut fold_auc = BTreeMap::new();
        let mut curves = Vec::new();
        for (fold, pairs) in &folds {
            if pairs.iter().any(|(_, g)| g.data().iter().any(|&v| v >= 0.5)) {
                let c = pr_curve_pooled(pairs, None)?;
                fold_auc.insert(*fold, c.auc);
                curves.push(c);
            }
        }
        let pr = match curves.len() {
            0 => None,
            1 => curves.pop(),
            _ => Some(average_pr_curves(&curves, averaging)?),
        };
        let task_f1 = match headline_level(task) {
            Level::Lesion => lesion.f1(),
            Level::Pixel => pixel.f1(),
        };
        aggregate.insert(
            task,
            TaskAggregate {
                images: entries.len(),
                pixel_rates: pixel.rates(),
                pixel,
                lesion_rates: lesion.rates(),
                lesion,
                task_f1,
                mean_eta,
                auc: pr.as_ref().map(|c| c.auc),
                fold_auc,
                pr,
            },
        );
    }

    Ok(EvalReport {
        sigma,
        pr_averaging: averaging,
        images: images.into_values().collect(),
        aggregate,
        context_od_auc: CONTEXT_OD_AUC.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    })
}

/// Colours prediction outcomes over `image` (`[3, H, W]`, 0..255): green for
/// true positives, red for false negatives, blue for false positives.
pub fn overlay(pred: &Tensor<f32>, gt: &Tensor<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("overlay", pred.shape(), gt.shape()));
    }
    let (h, w) = match *pred.shape() {
        [h, w] => (h, w),
        _ => return Err(Error::InvalidArgument(format!("mask must be H x W, got {:?}", pred.shape()))),
    };
    if image.shape() != [3, h, w] {
        return Err(Error::shape("overlay", image.shape(), &[3, h, w]));
    }
    let mut out = image.clone();
    let n = h * w;
    for i in 0..n {
        let colour = match (pred.data()[i] >= 0.5, gt.data()[i] >= 0.5) {
            (true, true) => [0.0, 255.0, 0.0],
            (false, true) => [255.0, 0.0, 0.0],
            (true, false) => [0.0, 0.0, 255.0],
            (false, false) => continue,
        };
        for (c, v) in colour.iter().enumerate() {
            out.data_mut()[c * n + i] = *v;
        }
    }
    Ok(out)
}

/// `threshold,precision,recall` rows; vertically averaged points leave the
/// threshold empty.
pub fn write_pr_csv(path: &Path, curve: &PrCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["threshold", "precision", "recall"])?;
    for p in &curve.points {
        let t = p.threshold.map(|t| t.to_string()).unwrap_or_default();
        w.write_record([t, p.precision.to_string(), p.recall.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(y0: usize, x0: usize, s: usize) -> Tensor<f32> {
        Tensor::from_fn(&[12, 12], |i| {
            let (y, x) = (i / 12, i % 12);
            ((y0..y0 + s).contains(&y) && (x0..x0 + s).contains(&x)) as u8 as f32
        })
    }

    fn item(id: &str, task: Task, pred: Tensor<f32>, gt: Tensor<f32>) -> ImageMasks {
        ImageMasks {
            id: id.into(),
            fold: None,
            task,
            probs: Some(pred.clone()),
            pred,
            gt,
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let items = vec![
            item("a", Task::Od, square(1, 1, 4), square(1, 1, 4)),
            item("a", Task::Ex, square(6, 6, 2), square(6, 6, 2)),
        ];
        let r = evaluate_predictions(&items, 0.2, PrAveraging::Vertical).unwrap();
        assert_eq!(r.task_f1(Task::Od), Some(1.0));
        assert_eq!(r.task_f1(Task::Ex), Some(1.0));
        assert_eq!(r.aggregate[&Task::Od].mean_eta, Some(1.0));
        assert_eq!(r.aggregate[&Task::Od].auc, Some(1.0));
        let json = r.to_json().unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn aggregate_is_order_invariant() {
        let a = item("a", Task::Ex, square(1, 1, 3), square(2, 2, 3));
        let b = item("b", Task::Ex, square(5, 5, 2), square(8, 8, 2));
        let c = item("c", Task::Ex, square(0, 6, 4), square(0, 7, 4));
        let r1 = evaluate_predictions(&[a.clone(), b.clone(), c.clone()], 0.2, PrAveraging::Vertical).unwrap();
        let r2 = evaluate_predictions(&[c, a, b], 0.2, PrAveraging::Vertical).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn overlay_colours() {
        let img = Tensor::full(&[3, 12, 12], 50.0);
        let gt = square(2, 2, 4);
        let same = overlay(&gt, &gt, &img).unwrap();
        for i in 0..144 {
            let px = [same.data()[i], same.data()[144 + i], same.data()[288 + i]];
            if gt.data()[i] == 1.0 {
                assert_eq!(px, [0.0, 255.0, 0.0]);
            } else {
                assert_eq!(px, [50.0, 50.0, 50.0]);
            }
        }
        let empty = overlay(&Tensor::zeros(&[12, 12]), &gt, &img).unwrap();
        for i in 0..144 {
            let px = [empty.data()[i], empty.data()[144 + i], empty.data()[288 + i]];
            let want = if gt.data()[i] == 1.0 { [255.0, 0.0, 0.0] } else { [50.0; 3] };
            assert_eq!(px, want);
        }
    }
}
