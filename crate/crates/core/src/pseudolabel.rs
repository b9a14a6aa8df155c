//! Pseudo-labeling operators: argmax maps for segmentation, score-thresholded
//! boxes for detection, and their transport into the strong view's frame.

use crate::error::{Error, Result};
use crate::geometry::{
    warp_boxes, warp_grid_nearest, warp_segmap_to, AffineTransform2D, BoxSet, SegMap,
    ValidityMask, DEFAULT_MIN_BOX_AREA, IGNORE_ID,
};
use crate::model::heads::SegLogits;

/// Detection pseudo-labels keep boxes scoring at least this much.
pub const DEFAULT_DET_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SegPseudoLabel {
    pub classes: SegMap,
    /// Max softmax probability per pixel (0 on ignored pixels).
    pub confidence: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetPseudoLabel {
    pub boxes: BoxSet,
}

/// Per-pixel argmax (lowest class id wins ties) and softmax confidence.
pub fn seg_sigma(logits: &SegLogits) -> Result<SegPseudoLabel> {
    let k = logits.num_classes();
    if k < 2 || k > IGNORE_ID as usize {
        return Err(Error::InvalidArgument(format!("segmentation needs 2..255 classes, got {k}")));
    }
    let n = logits.pixels();
    let mut classes = vec![0u8; n];
    let mut confidence = vec![0.0; n];
    for p in 0..n {
        let mut best = 0;
        let mut max = logits.get(0, p);
        for c in 1..k {
            let v = logits.get(c, p);
            if v > max {
                max = v;
                best = c;
            }
        }
        let mut denom = 0.0;
        for c in 0..k {
            let v = logits.get(c, p);
            if !v.is_finite() {
                return Err(Error::NonFinite("segmentation logits"));
            }
            denom += (v - max).exp();
        }
        classes[p] = best as u8;
        confidence[p] = 1.0 / denom;
    }
    Ok(SegPseudoLabel {
        classes: SegMap::from_vec(logits.width(), logits.height(), classes)?,
        confidence,
    })
}

/// Keeps exactly the boxes scoring at least `threshold`, in order.
pub fn det_sigma(preds: &BoxSet, threshold: f64) -> DetPseudoLabel {
    let kept = preds.iter().filter(|b| b.score >= threshold).copied().collect();
    DetPseudoLabel {
        boxes: BoxSet::new(kept).expect("subset of a valid box set"),
    }
}

impl SegPseudoLabel {
    /// Ignores pixels that carry no image content (e.g. padding of the weak view).
    pub fn mask_invalid(&mut self, mask: &ValidityMask) {
        self.classes.mask_invalid(mask);
        for (c, &ok) in self.confidence.iter_mut().zip(mask.data()) {
            if !ok {
                *c = 0.0;
            }
        }
    }
}

/// Moves pseudo-labels through `t` into a frame of size `frame`.
///
/// Class maps and confidences use nearest sampling (ignore / 0 outside the
/// source frame); boxes are warped, clipped and sliver-filtered.
pub fn map_pseudo(
    seg: &SegPseudoLabel,
    det: &DetPseudoLabel,
    t: &AffineTransform2D,
    frame: (usize, usize),
) -> Result<(SegPseudoLabel, DetPseudoLabel)> {
    let size = (seg.classes.width(), seg.classes.height());
    if *t == AffineTransform2D::IDENTITY && size == frame {
        return Ok((seg.clone(), det.clone()));
    }
    let classes = warp_segmap_to(&seg.classes, t, frame)?;
    let (confidence, _) = warp_grid_nearest(&seg.confidence, size, t, frame, 0.0)?;
    let boxes = warp_boxes(&det.boxes, t, frame, DEFAULT_MIN_BOX_AREA);
    Ok((SegPseudoLabel { classes, confidence }, DetPseudoLabel { boxes }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{invert, BBox};

    #[test]
    fn dominant_logit() {
        let logits = SegLogits::from_fn(4, 3, 2, |_, _, k| if k == 2 { 10.0 } else { 0.0 });
        let pl = seg_sigma(&logits).unwrap();
        assert!(pl.classes.classes().iter().all(|&c| c == 2));
        let expect = 10f64.exp() / (10f64.exp() + 3.0);
        assert!(pl.confidence.iter().all(|c| (c - expect).abs() < 1e-12));
    }

    #[test]
    fn uniform_logits_tie_to_lowest_class() {
        let logits = SegLogits::from_fn(4, 2, 2, |_, _, _| 0.3);
        let pl = seg_sigma(&logits).unwrap();
        assert!(pl.classes.classes().iter().all(|&c| c == 0));
        assert!(pl.confidence.iter().all(|c| (c - 0.25).abs() < 1e-12));
    }

    #[test]
    fn two_class_closed_form() {
        let logits = SegLogits::from_fn(2, 1, 1, |_, _, k| if k == 0 { 1.0 } else { 3.0 });
        let pl = seg_sigma(&logits).unwrap();
        assert_eq!(pl.classes.classes(), &[1]);
        let expect = 3f64.exp() / (1f64.exp() + 3f64.exp());
        assert!((pl.confidence[0] - expect).abs() < 1e-12);
        assert!((pl.confidence[0] - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn rejects_non_finite() {
        let logits = SegLogits::from_fn(2, 1, 1, |_, _, k| if k == 0 { f64::NAN } else { 0.0 });
        assert!(matches!(seg_sigma(&logits), Err(Error::NonFinite(_))));
    }

    fn boxes(scores: &[f64]) -> BoxSet {
        BoxSet::new(
            scores
                .iter()
                .enumerate()
                .map(|(i, &s)| BBox::new(i as f64, 0.0, i as f64 + 4.0, 4.0, 0, s).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn det_threshold_examples() {
        let kept = det_sigma(&boxes(&[0.6, 0.4]), 0.5);
        assert_eq!(kept.boxes.len(), 1);
        assert_eq!(kept.boxes.boxes()[0].score, 0.6);
        assert_eq!(det_sigma(&boxes(&[0.6, 0.4, 0.0]), 0.0).boxes.len(), 3);
        assert!(det_sigma(&BoxSet::empty(), 0.5).boxes.is_empty());
        // exactly at the threshold is kept
        assert_eq!(det_sigma(&boxes(&[0.5]), 0.5).boxes.len(), 1);
    }

    fn sample_pseudo() -> (SegPseudoLabel, DetPseudoLabel) {
        let classes: Vec<u8> = (0..64).map(|i| ((i % 8) / 3) as u8).collect();
        let seg = SegPseudoLabel {
            classes: SegMap::from_vec(8, 8, classes).unwrap(),
            confidence: (0..64).map(|i| i as f64 / 64.0).collect(),
        };
        let det = DetPseudoLabel {
            boxes: BoxSet::new(vec![
                BBox::new(1.0, 1.0, 4.0, 5.0, 0, 0.9).unwrap(),
                BBox::new(4.0, 2.0, 7.0, 6.0, 1, 0.7).unwrap(),
            ])
            .unwrap(),
        };
        (seg, det)
    }

    #[test]
    fn map_identity_is_noop() {
        let (seg, det) = sample_pseudo();
        let (s, d) = map_pseudo(&seg, &det, &AffineTransform2D::IDENTITY, (8, 8)).unwrap();
        assert_eq!((s, d), (seg, det));
    }

    #[test]
    fn map_hflip_mirrors() {
        let (seg, det) = sample_pseudo();
        let (s, d) = map_pseudo(&seg, &det, &AffineTransform2D::hflip(8), (8, 8)).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(s.classes.get(x, y), seg.classes.get(7 - x, y));
                assert_eq!(s.confidence[y * 8 + x], seg.confidence[y * 8 + 7 - x]);
            }
        }
        let b = d.boxes.boxes()[0];
        assert_eq!((b.x1, b.x2), (4.0, 7.0));
        let (back, back_det) = map_pseudo(&s, &d, &AffineTransform2D::hflip(8), (8, 8)).unwrap();
        assert_eq!(back, seg);
        assert_eq!(back_det, det);
    }

    #[test]
    fn map_translate_clips_and_ignores() {
        let (seg, det) = sample_pseudo();
        let t = AffineTransform2D::translation(5.0, 0.0);
        let (s, d) = map_pseudo(&seg, &det, &t, (8, 8)).unwrap();
        for y in 0..8 {
            for x in 0..5 {
                assert_eq!(s.classes.get(x, y), IGNORE_ID);
                assert_eq!(s.confidence[y * 8 + x], 0.0);
            }
            assert_eq!(s.classes.get(6, y), seg.classes.get(1, y));
        }
        // first box moves to [6, 9] and is clipped to [6, 8]; the second leaves the frame
        assert_eq!(d.boxes.len(), 1);
        let b = d.boxes.boxes()[0];
        assert_eq!((b.x1, b.x2, b.y1, b.y2), (6.0, 8.0, 1.0, 5.0));

        let inv = invert(&t).unwrap();
        let (back, _) = map_pseudo(&s, &d, &inv, (8, 8)).unwrap();
        for y in 0..8 {
            for x in 0..3 {
                assert_eq!(back.classes.get(x, y), seg.classes.get(x, y));
            }
        }
    }

    #[test]
    fn mask_invalid_sets_ignore() {
        let (mut seg, _) = sample_pseudo();
        let mut flags = vec![true; 64];
        flags[3] = false;
        seg.mask_invalid(&ValidityMask::from_vec(8, 8, flags).unwrap());
        assert_eq!(seg.classes.classes()[3], IGNORE_ID);
        assert_eq!(seg.confidence[3], 0.0);
    }
}
