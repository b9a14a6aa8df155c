//! Training objectives.
//!
//! Per-sample task losses return their value together with the gradient
//! w.r.t. the head outputs, so the engine can seed the network's reverse pass
//! directly. Batch-level losses average per-sample values over the relevant
//! part of the mini-batch and combine into
//! `L = Σ_t γ_t (L_s,t + λ_t L_u,t)`.

use crate::error::{Error, Result};
use crate::geometry::{BBox, BoxSet, SegMap, ValidityMask, IGNORE_ID};
use crate::model::heads::{decode_box, decode_box_backward, sigmoid, DetOutputs, SegLogits};
use crate::pseudolabel::{DetPseudoLabel, SegPseudoLabel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Segmentation,
    Detection,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Segmentation, Task::Detection];

    pub fn name(self) -> &'static str {
        match self {
            Task::Segmentation => "segmentation",
            Task::Detection => "detection",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskWeights {
    pub gamma: [f64; 2],
    pub lambda_max: [f64; 2],
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self {
            gamma: [1.0, 1.0],
            lambda_max: [1.0, 1.0],
        }
    }
}

/// Sigmoid-shaped ramp `exp(-5 (1 - s/warmup)^2)`, reaching 1 at `warmup`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RampSchedule {
    pub warmup_steps: u64,
}

impl RampSchedule {
    pub fn value(&self, step: u64) -> f64 {
        lambda_ramp(step, self.warmup_steps)
    }
}

pub fn lambda_ramp(step: u64, warmup_steps: u64) -> f64 {
    let warmup = warmup_steps.max(1);
    if step >= warmup {
        return 1.0;
    }
    let t = 1.0 - step as f64 / warmup as f64;
    (-5.0 * t * t).exp()
}

/// Mean cross-entropy over non-ignored pixels, with its gradient.
/// All-ignored targets give 0 and a zero gradient.
pub fn ce_seg(logits: &SegLogits, target: &SegMap) -> Result<(f64, Vec<f64>)> {
    let (k, n) = (logits.num_classes(), logits.pixels());
    if (target.width(), target.height()) != (logits.width(), logits.height()) {
        return Err(Error::shape(
            format!("{}x{}", logits.height(), logits.width()),
            format!("{}x{}", target.height(), target.width()),
        ));
    }
    let mut grad = vec![0.0; k * n];
    let valid: Vec<usize> = (0..n).filter(|&p| target.classes()[p] != IGNORE_ID).collect();
    if valid.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / valid.len() as f64;
    let mut total = 0.0;
    for &p in &valid {
        let y = target.classes()[p] as usize;
        if y >= k {
            return Err(Error::BadClassId {
                id: y as u32,
                classes: k,
            });
        }
        let max = (0..k).map(|c| logits.get(c, p)).fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::NonFinite("segmentation logits"));
        }
        let denom: f64 = (0..k).map(|c| (logits.get(c, p) - max).exp()).sum();
        total += denom.ln() + max - logits.get(y, p);
        for c in 0..k {
            let prob = (logits.get(c, p) - max).exp() / denom;
            let onehot = if c == y { 1.0 } else { 0.0 };
            grad[c * n + p] = (prob - onehot) * scale;
        }
    }
    Ok((total * scale, grad))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    /// Weight of positive targets; negatives get `1 - alpha`. `None` disables weighting.
    pub alpha: Option<f64>,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: Some(0.25),
        }
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Binary focal term and its derivative w.r.t. the logit.
fn focal_term(x: f64, positive: bool, params: &FocalParams) -> (f64, f64) {
    let g = params.gamma;
    let p = sigmoid(x);
    let q = sigmoid(-x);
    if positive {
        let w = params.alpha.unwrap_or(1.0);
        let log_p = -softplus(-x);
        let mod_ = q.powf(g);
        (-w * mod_ * log_p, w * mod_ * (g * p * log_p - q))
    } else {
        let w = params.alpha.map_or(1.0, |a| 1.0 - a);
        let log_q = -softplus(x);
        let mod_ = p.powf(g);
        (-w * mod_ * log_q, w * mod_ * (p - g * q * log_q))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorStatus {
    Positive(usize),
    Negative,
    Ignored,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorAssignment {
    pub status: Vec<AnchorStatus>,
}

impl AnchorAssignment {
    pub fn num_positive(&self) -> usize {
        self.status
            .iter()
            .filter(|s| matches!(s, AnchorStatus::Positive(_)))
            .count()
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.status.iter().enumerate().filter_map(|(a, s)| match s {
            AnchorStatus::Positive(g) => Some((a, *g)),
            _ => None,
        })
    }
}

pub const DEFAULT_POS_IOU: f64 = 0.5;
pub const DEFAULT_NEG_IOU: f64 = 0.4;

/// IoU-threshold matching with each ground truth's best anchor forced positive.
pub fn match_anchors(anchors: &[BBox], gts: &BoxSet, pos_iou: f64, neg_iou: f64) -> AnchorAssignment {
    let gts = gts.boxes();
    if gts.is_empty() {
        return AnchorAssignment {
            status: vec![AnchorStatus::Negative; anchors.len()],
        };
    }
    let iou: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gts.iter().map(|g| a.iou(g)).collect())
        .collect();
    let mut status: Vec<AnchorStatus> = iou
        .iter()
        .map(|row| {
            let (best, best_iou) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            if best_iou >= pos_iou {
                AnchorStatus::Positive(best)
            } else if best_iou < neg_iou {
                AnchorStatus::Negative
            } else {
                AnchorStatus::Ignored
            }
        })
        .collect();

    // forced matches: anchor -> (gt, iou) of the strongest gt claiming it
    let mut forced: Vec<Option<(usize, f64)>> = vec![None; anchors.len()];
    for j in 0..gts.len() {
        let (a, v) = (0..anchors.len())
            .map(|a| (a, iou[a][j]))
            .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        if v > 0.0 && forced[a].is_none_or(|(_, prev)| v > prev) {
            forced[a] = Some((j, v));
        }
    }
    for (a, f) in forced.into_iter().enumerate() {
        if let Some((j, _)) = f {
            if !matches!(status[a], AnchorStatus::Positive(_)) {
                status[a] = AnchorStatus::Positive(j);
            }
        }
    }
    AnchorAssignment { status }
}

/// Sigmoid focal loss over `A x K` class logits, normalized by the number of
/// positive anchors (at least 1). Positives supervise their class as 1 and
/// the rest as 0; negatives supervise all classes as 0 unless
/// `include_negatives` is false; ignored anchors never contribute.
pub fn focal(
    cls_logits: &[f64],
    num_classes: usize,
    assignment: &AnchorAssignment,
    gts: &BoxSet,
    params: &FocalParams,
    include_negatives: bool,
) -> Result<(f64, Vec<f64>)> {
    let k = num_classes;
    if cls_logits.len() != assignment.status.len() * k {
        return Err(Error::shape(
            format!("{}x{k} logits", assignment.status.len()),
            format!("{} logits", cls_logits.len()),
        ));
    }
    if cls_logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("classification logits"));
    }
    let norm = assignment.num_positive().max(1) as f64;
    let mut grad = vec![0.0; cls_logits.len()];
    let mut total = 0.0;
    for (a, status) in assignment.status.iter().enumerate() {
        let target = match *status {
            AnchorStatus::Ignored => continue,
            AnchorStatus::Negative if !include_negatives => continue,
            AnchorStatus::Negative => None,
            AnchorStatus::Positive(j) => {
                let c = gts.boxes()[j].class_id as usize;
                if c >= k {
                    return Err(Error::BadClassId { id: c as u32, classes: k });
                }
                Some(c)
            }
        };
        for c in 0..k {
            let (l, g) = focal_term(cls_logits[a * k + c], target == Some(c), params);
            total += l;
            grad[a * k + c] = g / norm;
        }
    }
    Ok((total / norm, grad))
}

/// `1 - GIoU` and its gradient w.r.t. the predicted `[x1, y1, x2, y2]`.
pub fn giou_loss(pred: [f64; 4], target: [f64; 4]) -> Result<(f64, [f64; 4])> {
    for b in [pred, target] {
        if !(b[0] < b[2] && b[1] < b[3]) {
            return Err(Error::DegenerateBox {
                x1: b[0],
                y1: b[1],
                x2: b[2],
                y2: b[3],
            });
        }
    }
    let [x1, y1, x2, y2] = pred;
    let [gx1, gy1, gx2, gy2] = target;
    let (pw, ph) = (x2 - x1, y2 - y1);
    let area_p = pw * ph;
    let area_g = (gx2 - gx1) * (gy2 - gy1);

    let iw_raw = x2.min(gx2) - x1.max(gx1);
    let ih_raw = y2.min(gy2) - y1.max(gy1);
    let overlap = iw_raw > 0.0 && ih_raw > 0.0;
    let (iw, ih) = if overlap { (iw_raw, ih_raw) } else { (0.0, 0.0) };
    let inter = iw * ih;
    let union = area_p + area_g - inter;
    let cw = x2.max(gx2) - x1.min(gx1);
    let ch = y2.max(gy2) - y1.min(gy1);
    let hull = cw * ch;
    let loss = 2.0 - inter / union - union / hull;

    // d inter / d pred
    let mut d_inter = [0.0; 4];
    if overlap {
        if x1 > gx1 {
            d_inter[0] = -ih;
        }
        if x2 < gx2 {
            d_inter[2] = ih;
        }
        if y1 > gy1 {
            d_inter[1] = -iw;
        }
        if y2 < gy2 {
            d_inter[3] = iw;
        }
    }
    let d_area = [-ph, -pw, ph, pw];
    let mut d_hull = [0.0; 4];
    if x1 < gx1 {
        d_hull[0] = -ch;
    }
    if x2 > gx2 {
        d_hull[2] = ch;
    }
    if y1 < gy1 {
        d_hull[1] = -cw;
    }
    if y2 > gy2 {
        d_hull[3] = cw;
    }
    let mut grad = [0.0; 4];
    for i in 0..4 {
        let d_union = d_area[i] - d_inter[i];
        let d_iou = (d_inter[i] * union - inter * d_union) / (union * union);
        let d_ratio = (d_union * hull - union * d_hull[i]) / (hull * hull);
        grad[i] = -d_iou - d_ratio;
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetLossConfig {
    pub anchors: Vec<BBox>,
    pub focal: FocalParams,
    pub pos_iou: f64,
    pub neg_iou: f64,
}

impl DetLossConfig {
    pub fn new(anchors: Vec<BBox>) -> Self {
        Self {
            anchors,
            focal: FocalParams::default(),
            pos_iou: DEFAULT_POS_IOU,
            neg_iou: DEFAULT_NEG_IOU,
        }
    }
}

/// Gradient of a loss w.r.t. one sample's head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrads {
    pub seg: Vec<f64>,
    pub det_cls: Vec<f64>,
    pub det_box: Vec<f64>,
}

impl SampleGrads {
    pub fn zeros_like(out: &SampleOutputs) -> Self {
        Self {
            seg: vec![0.0; out.seg.data().len()],
            det_cls: vec![0.0; out.det.cls().len()],
            det_box: vec![0.0; out.det.deltas().len()],
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &SampleGrads, scale: f64) {
        for (a, b) in [
            (&mut self.seg, &other.seg),
            (&mut self.det_cls, &other.det_cls),
            (&mut self.det_box, &other.det_box),
        ] {
            a.iter_mut().zip(b).for_each(|(a, b)| *a += scale * b);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutputs {
    pub seg: SegLogits,
    pub det: DetOutputs,
}

/// Focal + GIoU for one sample against `gts`. With `positive_only`, anchors
/// matched to background are dropped from the objective entirely.
pub fn detection_loss(
    out: &DetOutputs,
    gts: &BoxSet,
    cfg: &DetLossConfig,
    positive_only: bool,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if cfg.anchors.len() != out.num_anchors() {
        return Err(Error::shape(
            format!("{} anchors", cfg.anchors.len()),
            format!("{} anchors", out.num_anchors()),
        ));
    }
    let assignment = match_anchors(&cfg.anchors, gts, cfg.pos_iou, cfg.neg_iou);
    let (cls_loss, cls_grad) = focal(
        out.cls(),
        out.num_classes(),
        &assignment,
        gts,
        &cfg.focal,
        !positive_only,
    )?;
    let mut box_grad = vec![0.0; out.deltas().len()];
    let npos = assignment.num_positive();
    let mut box_loss = 0.0;
    if npos > 0 {
        let scale = 1.0 / npos as f64;
        for (a, j) in assignment.positives() {
            let anchor = &cfg.anchors[a];
            let d = out.anchor_deltas(a);
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("box deltas"));
            }
            let g = &gts.boxes()[j];
            let (l, dbox) = giou_loss(decode_box(anchor, d), [g.x1, g.y1, g.x2, g.y2])?;
            box_loss += l * scale;
            let dd = decode_box_backward(anchor, d, dbox);
            for i in 0..4 {
                box_grad[a * 4 + i] = dd[i] * scale;
            }
        }
    }
    Ok((cls_loss + box_loss, cls_grad, box_grad))
}

/// Mean objective of one task over a subset of the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskLoss {
    pub task: Task,
    pub value: f64,
    pub count: usize,
    /// Gradient of `value` per batch entry (zeros outside the subset).
    pub grads: Vec<SampleGrads>,
}

impl TaskLoss {
    fn empty(task: Task, outputs: &[SampleOutputs]) -> Self {
        Self {
            task,
            value: 0.0,
            count: 0,
            grads: outputs.iter().map(SampleGrads::zeros_like).collect(),
        }
    }
}

/// Labels of one sample, already carried into the weak view's frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleLabels {
    pub seg: Option<SegMap>,
    pub det: Option<BoxSet>,
}

fn check_members(members: &[usize], n: usize) -> Result<()> {
    match members.iter().find(|&&i| i >= n) {
        Some(&i) => Err(Error::InvalidArgument(format!("batch member {i} out of {n}"))),
        None => Ok(()),
    }
}

/// `L_s,t`: mean over `members` (B^l_t) of the task objective against labels.
pub fn supervised_loss(
    task: Task,
    outputs: &[SampleOutputs],
    labels: &[SampleLabels],
    members: &[usize],
    det_cfg: &DetLossConfig,
) -> Result<TaskLoss> {
    check_members(members, outputs.len().min(labels.len()))?;
    let mut res = TaskLoss::empty(task, outputs);
    if members.is_empty() {
        return Ok(res);
    }
    let scale = 1.0 / members.len() as f64;
    for &i in members {
        let missing = || Error::MissingLabel {
            sample: i,
            task: task.name(),
        };
        let g = &mut res.grads[i];
        let loss = match task {
            Task::Segmentation => {
                let target = labels[i].seg.as_ref().ok_or_else(missing)?;
                let (l, grad) = ce_seg(&outputs[i].seg, target)?;
                g.seg = grad;
                l
            }
            Task::Detection => {
                let gts = labels[i].det.as_ref().ok_or_else(missing)?;
                let (l, cls, boxes) = detection_loss(&outputs[i].det, gts, det_cfg, false)?;
                g.det_cls = cls;
                g.det_box = boxes;
                l
            }
        };
        res.value += loss * scale;
        for v in g.seg.iter_mut().chain(&mut g.det_cls).chain(&mut g.det_box) {
            *v *= scale;
        }
    }
    res.count = members.len();
    Ok(res)
}

/// Pseudo-targets of one sample in the strong view's frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoTargets {
    pub seg: SegPseudoLabel,
    pub det: DetPseudoLabel,
    /// Validity of the strong view itself.
    pub validity: ValidityMask,
}

/// `L_u,t`: mean over `members` (B^u_t) of the consistency objective of the
/// student's strong-view outputs against mapped teacher pseudo-labels.
pub fn unsupervised_loss(
    task: Task,
    outputs: &[SampleOutputs],
    pseudo: &[PseudoTargets],
    members: &[usize],
    det_cfg: &DetLossConfig,
) -> Result<TaskLoss> {
    check_members(members, outputs.len().min(pseudo.len()))?;
    let mut res = TaskLoss::empty(task, outputs);
    if members.is_empty() {
        return Ok(res);
    }
    let scale = 1.0 / members.len() as f64;
    for &i in members {
        let (out, target) = (&outputs[i], &pseudo[i]);
        let g = &mut res.grads[i];
        let loss = match task {
            Task::Segmentation => {
                let classes = &target.seg.classes;
                let dims = (out.seg.width(), out.seg.height());
                if (classes.width(), classes.height()) != dims
                    || (target.validity.width(), target.validity.height()) != dims
                {
                    return Err(Error::shape(
                        format!("{}x{}", dims.1, dims.0),
                        format!("{}x{}", classes.height(), classes.width()),
                    ));
                }
                let mut classes = classes.clone();
                classes.mask_invalid(&target.validity);
                let (l, grad) = ce_seg(&out.seg, &classes)?;
                g.seg = grad;
                l
            }
            Task::Detection => {
                let (l, cls, boxes) = detection_loss(&out.det, &target.det.boxes, det_cfg, true)?;
                g.det_cls = cls;
                g.det_box = boxes;
                l
            }
        };
        res.value += loss * scale;
        for v in g.seg.iter_mut().chain(&mut g.det_cls).chain(&mut g.det_box) {
            *v *= scale;
        }
    }
    res.count = members.len();
    Ok(res)
}

/// Supervised and unsupervised means of one task.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TaskTerms {
    pub supervised: f64,
    pub unsupervised: f64,
    pub labeled: usize,
    pub unlabeled: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskReport {
    pub terms: TaskTerms,
    pub gamma: f64,
    pub lambda: f64,
}

impl TaskReport {
    pub fn weighted(&self) -> f64 {
        self.gamma * (self.terms.supervised + self.lambda * self.terms.unsupervised)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub tasks: [TaskReport; 2],
    pub total: f64,
}

impl LossReport {
    pub fn task(&self, t: Task) -> &TaskReport {
        &self.tasks[t.index()]
    }

    /// Coefficient of `L_s,t` in the total.
    pub fn supervised_coef(&self, t: Task) -> f64 {
        self.task(t).gamma
    }

    /// Coefficient of `L_u,t` in the total.
    pub fn unsupervised_coef(&self, t: Task) -> f64 {
        self.task(t).gamma * self.task(t).lambda
    }
}

/// `L = Σ_t γ_t (L_s,t + λ_t(step) L_u,t)`, with `λ_t` capped at `lambda_max`.
pub fn total_loss(parts: [TaskTerms; 2], weights: &TaskWeights, step: u64, ramp: &RampSchedule) -> LossReport {
    let ramp_value = ramp.value(step);
    let tasks = Task::ALL.map(|t| TaskReport {
        terms: parts[t.index()],
        gamma: weights.gamma[t.index()],
        lambda: ramp_value.min(weights.lambda_max[t.index()]),
    });
    let total = tasks.iter().map(TaskReport::weighted).sum();
    LossReport { step, tasks, total }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64, c: u32) -> BBox {
        BBox::new(x1, y1, x2, y2, c, 1.0).unwrap()
    }

    #[test]
    fn ce_uniform_is_ln_k() {
        let logits = SegLogits::from_fn(4, 3, 3, |_, _, _| 0.7);
        let target = SegMap::from_vec(3, 3, vec![0, 1, 2, 3, 0, 1, 2, 3, 0]).unwrap();
        let (l, _) = ce_seg(&logits, &target).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_saturated_and_ignored() {
        let target = SegMap::from_vec(2, 1, vec![1, 0]).unwrap();
        let logits = SegLogits::from_fn(3, 2, 1, |_, x, k| if (x == 0 && k == 1) || (x == 1 && k == 0) { 1000.0 } else { 0.0 });
        assert!(ce_seg(&logits, &target).unwrap().0 < 1e-6);

        let ignored = SegMap::filled(2, 1, IGNORE_ID);
        let (l, g) = ce_seg(&logits, &ignored).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ce_rejects_bad_class() {
        let logits = SegLogits::from_fn(3, 1, 1, |_, _, _| 0.0);
        let target = SegMap::from_vec(1, 1, vec![3]).unwrap();
        assert!(matches!(ce_seg(&logits, &target), Err(Error::BadClassId { id: 3, .. })));
    }

    #[test]
    fn focal_single_positive_closed_form() {
        let anchors = vec![bx(0.0, 0.0, 10.0, 10.0, 0)];
        let gts = BoxSet::new(vec![bx(0.0, 0.0, 10.0, 10.0, 0)]).unwrap();
        let assign = match_anchors(&anchors, &gts, 0.5, 0.4);
        let logit = 9f64.ln(); // p = 0.9
        let (l, _) = focal(&[logit], 1, &assign, &gts, &FocalParams::default(), true).unwrap();
        let expect = -0.25 * 0.1f64.powi(2) * 0.9f64.ln();
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 2.634e-4).abs() < 1e-7);
    }

    #[test]
    fn focal_single_negative_closed_form() {
        let anchors = vec![bx(0.0, 0.0, 10.0, 10.0, 0)];
        let assign = match_anchors(&anchors, &BoxSet::empty(), 0.5, 0.4);
        let k = 3;
        let (l, _) = focal(&vec![0.0; k], k, &assign, &BoxSet::empty(), &FocalParams::default(), true).unwrap();
        let expect = k as f64 * (-0.75 * 0.25 * 0.5f64.ln());
        assert!((l - expect).abs() < 1e-12);
        let (l, g) = focal(&vec![0.0; k], k, &assign, &BoxSet::empty(), &FocalParams::default(), false).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn focal_collapses_to_bce() {
        let anchors: Vec<BBox> = (0..4).map(|i| bx(i as f64 * 20.0, 0.0, i as f64 * 20.0 + 10.0, 10.0, 0)).collect();
        let gts = BoxSet::new(vec![bx(0.0, 0.0, 10.0, 10.0, 1), bx(40.0, 0.0, 50.0, 10.0, 0)]).unwrap();
        let assign = match_anchors(&anchors, &gts, 0.5, 0.4);
        let logits = [0.3, -1.2, 2.5, 0.1, -0.7, 1.9, -3.0, 0.8];
        let params = FocalParams { gamma: 0.0, alpha: None };
        let (l, _) = focal(&logits, 2, &assign, &gts, &params, true).unwrap();
        let mut bce = 0.0;
        for (a, s) in assign.status.iter().enumerate() {
            for c in 0..2 {
                let x: f64 = logits[a * 2 + c];
                let y = matches!(s, AnchorStatus::Positive(j) if gts.boxes()[*j].class_id as usize == c);
                let p = 1.0 / (1.0 + (-x).exp());
                bce -= if y { p.ln() } else { (1.0 - p).ln() };
            }
        }
        assert!((l - bce / 2.0).abs() < 1e-9, "{l} vs {}", bce / 2.0);
    }

    #[test]
    fn giou_examples() {
        assert!(giou_loss([1.0, 2.0, 5.0, 7.0], [1.0, 2.0, 5.0, 7.0]).unwrap().0.abs() < 1e-15);
        let (l, _) = giou_loss([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]).unwrap();
        assert!((l - (1.0 - (1.0 / 7.0 - 2.0 / 9.0))).abs() < 1e-12);
        let (l, _) = giou_loss([0.0, 0.0, 1.0, 1.0], [9.0, 9.0, 10.0, 10.0]).unwrap();
        assert!((l - 1.98).abs() < 1e-12);
        assert!(matches!(
            giou_loss([0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 1.0, 1.0]),
            Err(Error::DegenerateBox { .. })
        ));
    }

    #[test]
    fn match_examples() {
        let gts = BoxSet::new(vec![bx(0.0, 0.0, 10.0, 22.0, 0)]).unwrap();
        let anchors = vec![
            bx(0.0, 0.0, 10.0, 22.0, 0),  // identical: positive
            bx(50.0, 50.0, 60.0, 60.0, 0), // disjoint: negative
            bx(0.0, 0.0, 10.0, 10.0, 0),  // IoU 100/220 ~ 0.455: ignored
        ];
        let a = match_anchors(&anchors, &gts, 0.5, 0.4);
        assert_eq!(
            a.status,
            vec![AnchorStatus::Positive(0), AnchorStatus::Negative, AnchorStatus::Ignored]
        );
        let gts19 = BoxSet::new(vec![bx(0.0, 0.0, 10.0, 19.0, 0)]).unwrap();
        let a = match_anchors(&anchors[2..], &gts19, 0.5, 0.4);
        assert_eq!(a.status, vec![AnchorStatus::Positive(0)]);
    }

    #[test]
    fn match_forces_best_anchor() {
        let gts = BoxSet::new(vec![bx(0.0, 0.0, 30.0, 30.0, 0)]).unwrap();
        let anchors = vec![bx(0.0, 0.0, 10.0, 10.0, 0), bx(100.0, 100.0, 110.0, 110.0, 0)];
        let a = match_anchors(&anchors, &gts, 0.5, 0.4);
        assert_eq!(a.status, vec![AnchorStatus::Positive(0), AnchorStatus::Negative]);
        let none = match_anchors(&anchors, &BoxSet::empty(), 0.5, 0.4);
        assert!(none.status.iter().all(|s| *s == AnchorStatus::Negative));
    }

    #[test]
    fn ramp_closed_forms() {
        assert!((lambda_ramp(0, 100) - (-5f64).exp()).abs() < 1e-15);
        assert!((lambda_ramp(50, 100) - (-1.25f64).exp()).abs() < 1e-15);
        assert_eq!(lambda_ramp(100, 100), 1.0);
        assert_eq!(lambda_ramp(1000, 100), 1.0);
        assert!((lambda_ramp(0, 100) - 0.006738).abs() < 1e-6);
        assert!((lambda_ramp(50, 100) - 0.2865).abs() < 1e-4);
    }

    #[test]
    fn total_examples() {
        let ramp = RampSchedule { warmup_steps: 10 };
        let parts = [
            TaskTerms { supervised: 0.5, unsupervised: 0.1, labeled: 1, unlabeled: 1 },
            TaskTerms { supervised: 0.3, unsupervised: 0.2, labeled: 1, unlabeled: 1 },
        ];
        let r = total_loss(parts, &TaskWeights::default(), 10, &ramp);
        assert!((r.total - 1.1).abs() < 1e-12);

        let r0 = total_loss(parts, &TaskWeights::default(), 0, &ramp);
        let lam = (-5f64).exp();
        assert!((r0.total - (0.8 + lam * 0.3)).abs() < 1e-12);

        let seg_only = TaskWeights { gamma: [1.0, 0.0], ..Default::default() };
        let r = total_loss(parts, &seg_only, 10, &ramp);
        assert!((r.total - 0.6).abs() < 1e-12);

        let no_unsup = TaskWeights { lambda_max: [0.0, 0.0], ..Default::default() };
        let r = total_loss(parts, &no_unsup, 10, &ramp);
        assert_eq!(r.total, 0.5 + 0.3);
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], tol: f64) {
        for i in 0..x.len() {
            let (mut p, mut m) = (x.to_vec(), x.to_vec());
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - analytic[i]).abs() < tol, "{i}: fd {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let target = SegMap::from_vec(3, 2, vec![0, 2, IGNORE_ID, 1, 1, 0]).unwrap();
        let data: Vec<f64> = (0..18).map(|i| ((i * 7) % 11) as f64 * 0.3 - 1.5).collect();
        let logits = SegLogits::new(3, 3, 2, data.clone()).unwrap();
        let (_, g) = ce_seg(&logits, &target).unwrap();
        let f = |x: &[f64]| ce_seg(&SegLogits::new(3, 3, 2, x.to_vec()).unwrap(), &target).unwrap().0;
        fd_check(f, &data, &g, 1e-7);
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let anchors: Vec<BBox> = (0..3).map(|i| bx(i as f64 * 12.0, 0.0, i as f64 * 12.0 + 10.0, 10.0, 0)).collect();
        let gts = BoxSet::new(vec![bx(0.0, 0.0, 10.0, 10.0, 1)]).unwrap();
        let assign = match_anchors(&anchors, &gts, 0.5, 0.4);
        let x = [0.4, -0.9, 1.3, -2.2, 0.05, 3.1];
        for neg in [true, false] {
            let (_, g) = focal(&x, 2, &assign, &gts, &FocalParams::default(), neg).unwrap();
            let f = |x: &[f64]| focal(x, 2, &assign, &gts, &FocalParams::default(), neg).unwrap().0;
            fd_check(f, &x, &g, 1e-7);
        }
    }

    #[test]
    fn giou_gradient_matches_finite_differences() {
        let cases = [
            ([0.3, 0.2, 2.1, 2.4], [1.0, 1.1, 3.0, 3.3]),
            ([0.0, 0.0, 1.0, 1.5], [4.0, 5.0, 6.0, 7.0]),
            ([1.2, 1.3, 2.0, 2.2], [0.0, 0.0, 4.0, 4.0]),
        ];
        for (p, t) in cases {
            let (_, g) = giou_loss(p, t).unwrap();
            let f = |x: &[f64]| giou_loss([x[0], x[1], x[2], x[3]], t).unwrap().0;
            fd_check(f, &p, &g, 1e-6);
        }
    }

    #[test]
    fn detection_gradient_matches_finite_differences() {
        let anchors = crate::model::heads::AnchorGrid { grid_w: 3, grid_h: 3, stride: 8.0, side: 16.0 }.anchors();
        let gts = BoxSet::new(vec![bx(2.0, 3.0, 17.0, 15.0, 1), bx(10.0, 9.0, 22.0, 23.0, 0)]).unwrap();
        let cfg = DetLossConfig::new(anchors);
        let cls: Vec<f64> = (0..18).map(|i| ((i * 5) % 7) as f64 * 0.4 - 1.2).collect();
        let deltas: Vec<f64> = (0..36).map(|i| ((i * 3) % 5) as f64 * 0.05 - 0.1).collect();
        for positive_only in [false, true] {
            let out = DetOutputs::new(2, cls.clone(), deltas.clone()).unwrap();
            let (_, gc, gb) = detection_loss(&out, &gts, &cfg, positive_only).unwrap();
            let fc = |x: &[f64]| {
                detection_loss(&DetOutputs::new(2, x.to_vec(), deltas.clone()).unwrap(), &gts, &cfg, positive_only).unwrap().0
            };
            fd_check(fc, &cls, &gc, 1e-7);
            let fb = |x: &[f64]| {
                detection_loss(&DetOutputs::new(2, cls.clone(), x.to_vec()).unwrap(), &gts, &cfg, positive_only).unwrap().0
            };
            fd_check(fb, &deltas, &gb, 1e-6);
        }
    }

    #[test]
    fn batch_losses_average_over_members_only() {
        let seg = |v: f64| SegLogits::from_fn(2, 2, 1, move |_, x, k| if k == 0 { v * x as f64 } else { 0.0 });
        let det = DetOutputs::new(1, vec![0.0], vec![0.0; 4]).unwrap();
        let outputs: Vec<SampleOutputs> = [0.5, 2.0, -1.0]
            .iter()
            .map(|&v| SampleOutputs { seg: seg(v), det: det.clone() })
            .collect();
        let target = SegMap::from_vec(2, 1, vec![0, 1]).unwrap();
        let labels = vec![
            SampleLabels { seg: Some(target.clone()), det: None },
            SampleLabels::default(),
            SampleLabels { seg: Some(target.clone()), det: None },
        ];
        let cfg = DetLossConfig::new(vec![bx(0.0, 0.0, 2.0, 1.0, 0)]);
        let r = supervised_loss(Task::Segmentation, &outputs, &labels, &[0, 2], &cfg).unwrap();
        let l0 = ce_seg(&outputs[0].seg, &target).unwrap().0;
        let l2 = ce_seg(&outputs[2].seg, &target).unwrap().0;
        assert!((r.value - (l0 + l2) / 2.0).abs() < 1e-12);
        assert!(r.grads[1].seg.iter().all(|&g| g == 0.0));
        assert!(matches!(
            supervised_loss(Task::Segmentation, &outputs, &labels, &[1], &cfg),
            Err(Error::MissingLabel { sample: 1, .. })
        ));
        let empty = supervised_loss(Task::Detection, &outputs, &labels, &[], &cfg).unwrap();
        assert_eq!((empty.value, empty.count), (0.0, 0));
    }
}
