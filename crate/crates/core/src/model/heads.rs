//! Per-sample head outputs, anchors and box decoding.

use crate::error::{Error, Result};
use crate::geometry::{BBox, BoxSet};

/// Box deltas for width/height are clamped to this magnitude before `exp`.
pub const LOG_SIZE_CLAMP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Segmentation logits of one sample, class-major (`K x H x W`).
#[derive(Clone, Debug, PartialEq)]
pub struct SegLogits {
    num_classes: usize,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl SegLogits {
    pub fn new(num_classes: usize, width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != num_classes * width * height {
            return Err(Error::shape(
                format!("{num_classes}x{height}x{width}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self {
            num_classes,
            width,
            height,
            data,
        })
    }

    /// Builds from a pixel-major closure `f(y, x, k)`.
    pub fn from_fn(
        num_classes: usize,
        width: usize,
        height: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = vec![0.0; num_classes * width * height];
        for k in 0..num_classes {
            for y in 0..height {
                for x in 0..width {
                    data[(k * height + y) * width + x] = f(y, x, k);
                }
            }
        }
        Self {
            num_classes,
            width,
            height,
            data,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, k: usize, pixel: usize) -> f64 {
        self.data[k * self.pixels() + pixel]
    }
}

/// Detection head outputs of one sample in anchor-major layout:
/// `cls[a * K + k]` and `deltas[a * 4 + j]` with deltas `(dx, dy, dw, dh)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DetOutputs {
    num_classes: usize,
    cls: Vec<f64>,
    deltas: Vec<f64>,
}

impl DetOutputs {
    pub fn new(num_classes: usize, cls: Vec<f64>, deltas: Vec<f64>) -> Result<Self> {
        if num_classes == 0 || cls.len() % num_classes != 0 || deltas.len() != cls.len() / num_classes * 4 {
            return Err(Error::shape(
                format!("A*{num_classes} logits and A*4 deltas"),
                format!("{} logits, {} deltas", cls.len(), deltas.len()),
            ));
        }
        Ok(Self {
            num_classes,
            cls,
            deltas,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_anchors(&self) -> usize {
        self.deltas.len() / 4
    }

    pub fn cls(&self) -> &[f64] {
        &self.cls
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn cls_mut(&mut self) -> &mut [f64] {
        &mut self.cls
    }

    pub fn deltas_mut(&mut self) -> &mut [f64] {
        &mut self.deltas
    }

    pub fn anchor_deltas(&self, a: usize) -> [f64; 4] {
        let d = &self.deltas[a * 4..a * 4 + 4];
        [d[0], d[1], d[2], d[3]]
    }
}

/// One square anchor per cell of a regular grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorGrid {
    pub grid_w: usize,
    pub grid_h: usize,
    pub stride: f64,
    pub side: f64,
}

impl AnchorGrid {
    /// Anchors in row-major cell order, centered on their cells.
    pub fn anchors(&self) -> Vec<BBox> {
        let half = self.side / 2.0;
        let mut out = Vec::with_capacity(self.grid_w * self.grid_h);
        for gy in 0..self.grid_h {
            for gx in 0..self.grid_w {
                let cx = (gx as f64 + 0.5) * self.stride;
                let cy = (gy as f64 + 0.5) * self.stride;
                out.push(BBox {
                    x1: cx - half,
                    y1: cy - half,
                    x2: cx + half,
                    y2: cy + half,
                    class_id: 0,
                    score: 1.0,
                });
            }
        }
        out
    }
}

/// Decodes `(dx, dy, dw, dh)` about an anchor into `[x1, y1, x2, y2]`.
pub fn decode_box(anchor: &BBox, d: [f64; 4]) -> [f64; 4] {
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = (anchor.x1 + anchor.x2) / 2.0 + d[0] * aw;
    let cy = (anchor.y1 + anchor.y2) / 2.0 + d[1] * ah;
    let w = aw * d[2].clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP).exp();
    let h = ah * d[3].clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP).exp();
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

/// Pulls a gradient w.r.t. the decoded corners back onto the deltas.
pub fn decode_box_backward(anchor: &BBox, d: [f64; 4], g: [f64; 4]) -> [f64; 4] {
    let (aw, ah) = (anchor.width(), anchor.height());
    let dw_grad = if d[2].abs() < LOG_SIZE_CLAMP {
        0.5 * aw * d[2].exp() * (g[2] - g[0])
    } else {
        0.0
    };
    let dh_grad = if d[3].abs() < LOG_SIZE_CLAMP {
        0.5 * ah * d[3].exp() * (g[3] - g[1])
    } else {
        0.0
    };
    [aw * (g[0] + g[2]), ah * (g[1] + g[3]), dw_grad, dh_grad]
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Greedy per-class non-maximum suppression. Input order breaks score ties.
pub fn nms(boxes: &[BBox], iou_threshold: f64) -> Vec<BBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score));
    let mut kept: Vec<BBox> = Vec::new();
    for i in order {
        let b = boxes[i];
        if kept
            .iter()
            .all(|k| k.class_id != b.class_id || k.iou(&b) <= iou_threshold)
        {
            kept.push(b);
        }
    }
    kept
}

/// Turns head outputs into scored boxes: per-anchor argmax class with its
/// sigmoid score, decoded and clipped box, per-class NMS, top `max_out`.
pub fn decode_detections(
    det: &DetOutputs,
    anchors: &[BBox],
    frame: (usize, usize),
    nms_iou: f64,
    max_out: usize,
) -> Result<BoxSet> {
    if anchors.len() != det.num_anchors() {
        return Err(Error::shape(
            format!("{} anchors", anchors.len()),
            format!("{} anchors", det.num_anchors()),
        ));
    }
    let k = det.num_classes();
    let mut candidates = Vec::with_capacity(anchors.len());
    for (a, anchor) in anchors.iter().enumerate() {
        let logits = &det.cls()[a * k..(a + 1) * k];
        let (best, &logit) = logits
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
        if !logit.is_finite() {
            return Err(Error::NonFinite("detection logits"));
        }
        let [x1, y1, x2, y2] = decode_box(anchor, det.anchor_deltas(a));
        let raw = BBox {
            x1,
            y1,
            x2,
            y2,
            class_id: best as u32,
            score: sigmoid(logit),
        };
        if let Some(b) = raw.clipped(frame) {
            candidates.push(b);
        }
    }
    let mut kept = nms(&candidates, nms_iou);
    kept.truncate(max_out);
    BoxSet::new(kept)
}
