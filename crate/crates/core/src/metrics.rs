//! Segmentation mIoU, detection AP/mAP and geometric-mean checkpoint selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoxSet, SegMap, IGNORE_ID};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            k: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::shape(format!("{num_classes}x{num_classes}"), format!("{} counts", counts.len())));
        }
        Ok(Self { k: num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel whose ground truth is not ignored.
    pub fn add(&mut self, gt: &SegMap, pred: &SegMap) -> Result<()> {
        if (gt.width(), gt.height()) != (pred.width(), pred.height()) {
            return Err(Error::shape(
                format!("{}x{}", gt.height(), gt.width()),
                format!("{}x{}", pred.height(), pred.width()),
            ));
        }
        for (&g, &p) in gt.classes().iter().zip(pred.classes()) {
            if g == IGNORE_ID {
                continue;
            }
            for c in [g, p] {
                if c as usize >= self.k {
                    return Err(Error::BadClassId {
                        id: c as u32,
                        classes: self.k,
                    });
                }
            }
            self.counts[g as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::shape(format!("{} classes", self.k), format!("{} classes", other.k)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    pub std: f64,
}

pub fn miou(cm: &ConfusionMatrix) -> Result<MiouReport> {
    let k = cm.num_classes();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("mIoU needs at least 2 classes, got {k}")));
    }
    if cm.total() == 0 {
        return Err(Error::EmptyMatrix);
    }
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let row: u64 = (0..k).map(|j| cm.get(c, j)).sum();
            let col: u64 = (0..k).map(|i| cm.get(i, c)).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let n = present.len() as f64;
    let mean = present.iter().sum::<f64>() / n;
    let std = (present.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(MiouReport { per_class, mean, std })
}

/// Ranked detections of one class pooled over images.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    /// `(score, is_true_positive)`, sorted by score descending.
    pub ranked: Vec<(f64, bool)>,
    pub num_gt: usize,
}

pub const RECALL_POINTS: usize = 101;

impl PrCurve {
    /// Cumulative `(recall, precision)` after each rank.
    pub fn points(&self) -> Vec<(f64, f64)> {
        let mut tp = 0usize;
        self.ranked
            .iter()
            .enumerate()
            .map(|(i, &(_, hit))| {
                tp += hit as usize;
                (tp as f64 / self.num_gt as f64, tp as f64 / (i + 1) as f64)
            })
            .collect()
    }

    /// Area under the precision envelope sampled at 101 recall levels.
    pub fn ap(&self) -> f64 {
        let pts = self.points();
        let mut envelope = vec![0.0; pts.len()];
        let mut best: f64 = 0.0;
        for i in (0..pts.len()).rev() {
            best = best.max(pts[i].1);
            envelope[i] = best;
        }
        let mut sum = 0.0;
        let mut j = 0;
        for r in 0..RECALL_POINTS {
            let level = r as f64 / (RECALL_POINTS - 1) as f64;
            while j < pts.len() && pts[j].0 < level {
                j += 1;
            }
            if j < pts.len() {
                sum += envelope[j];
            }
        }
        sum / RECALL_POINTS as f64
    }
}

/// COCO-style thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Builds the PR curve of `class` at one IoU threshold. Within each image,
/// detections are visited by descending score and claim the best-overlapping
/// unmatched ground truth of their class.
pub fn pr_curve(dets: &[BoxSet], gts: &[BoxSet], class: u32, iou_threshold: f64) -> PrCurve {
    let mut ranked = Vec::new();
    let mut num_gt = 0;
    for (d, g) in dets.iter().zip(gts) {
        let g: Vec<_> = g.iter().filter(|b| b.class_id == class).collect();
        num_gt += g.len();
        let mut order: Vec<_> = d.iter().filter(|b| b.class_id == class).collect();
        order.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut taken = vec![false; g.len()];
        for det in order {
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in g.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let iou = det.iou(gt);
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
            }
            ranked.push((det.score, best.is_some()));
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    PrCurve { ranked, num_gt }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// AP averaged over thresholds; `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    /// mAP at each threshold.
    pub per_threshold: Vec<(f64, f64)>,
    /// Mean over thresholds of the class-mean AP (0 when no class has ground truth).
    pub map: f64,
}

pub fn average_precision(dets: &[BoxSet], gts: &[BoxSet], num_classes: usize, thresholds: &[f64]) -> Result<ApReport> {
    if dets.len() != gts.len() {
        return Err(Error::shape(format!("{} images", gts.len()), format!("{} images", dets.len())));
    }
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("no IoU thresholds".into()));
    }
    let present: Vec<bool> = (0..num_classes as u32)
        .map(|c| gts.iter().any(|g| g.iter().any(|b| b.class_id == c)))
        .collect();
    let mut per_class_sum = vec![0.0; num_classes];
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut aps = Vec::new();
        for c in 0..num_classes {
            if present[c] {
                let ap = pr_curve(dets, gts, c as u32, t).ap();
                per_class_sum[c] += ap;
                aps.push(ap);
            }
        }
        let m = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
        per_threshold.push((t, m));
    }
    let nt = thresholds.len() as f64;
    Ok(ApReport {
        per_class: (0..num_classes).map(|c| present[c].then(|| per_class_sum[c] / nt)).collect(),
        map: per_threshold.iter().map(|p| p.1).sum::<f64>() / nt,
        per_threshold,
    })
}

pub fn geometric_mean(miou: f64, map: f64) -> f64 {
    (miou.max(0.0) * map.max(0.0)).sqrt()
}

/// Index of the entry `(step, mIoU, mAP)` maximizing `sqrt(mIoU * mAP)`; ties keep the earliest.
pub fn geometric_mean_select(history: &[(u64, f64, f64)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &(_, m, a)) in history.iter().enumerate() {
        let g = geometric_mean(m, a);
        if best.is_none_or(|(_, b)| g > b) {
            best = Some((i, g));
        }
    }
    best.map(|(i, _)| i)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| format!("{x:.4}"))
}

/// Human-readable per-class table followed by a summary row.
pub fn format_report(seg: &MiouReport, seg_names: &[&str], det: &ApReport, det_names: &[&str]) -> String {
    let mut s = String::from("task          class        value\n");
    for (i, v) in seg.per_class.iter().enumerate() {
        let name = seg_names.get(i).copied().unwrap_or("?");
        s += &format!("segmentation  {name:<12} {}\n", cell(*v));
    }
    for (i, v) in det.per_class.iter().enumerate() {
        let name = det_names.get(i).copied().unwrap_or("?");
        s += &format!("detection     {name:<12} {}\n", cell(*v));
    }
    s += &format!(
        "summary       mIoU={:.4} (std {:.4})  mAP={:.4}  gmean={:.4}\n",
        seg.mean,
        seg.std,
        det.map,
        geometric_mean(seg.mean, det.map)
    );
    s
}
