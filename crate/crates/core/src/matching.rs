//! Detection target metrics on top of a GT-to-detection matching:
//! mean-IoU, Object IoU and Delta Object IoU.

use crate::scalar::Scalar;
use crate::types::{iou, Detection};
use serde::{Deserialize, Serialize};

/// Matching knobs. Class-aware by default; single-class tasks may disable
/// the class check.
#[derive(Debug, Clone, Copy)]
pub struct MatchOptions<T: Scalar = f64> {
    pub threshold: T,
    pub class_aware: bool,
}

impl<T: Scalar> Default for MatchOptions<T> {
    fn default() -> Self {
        Self {
            threshold: T::from_f64(0.5),
            class_aware: true,
        }
    }
}

impl<T: Scalar> MatchOptions<T> {
    pub fn with_threshold(threshold: T) -> Self {
        Self {
            threshold,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair<T: Scalar = f64> {
    pub gt_index: usize,
    pub det_index: usize,
    pub iou: T,
}

/// A partial injective mapping between GT objects and detections: each
/// index appears in at most one pair and every pair clears the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult<T: Scalar = f64> {
    /// Pairs in greedy acceptance order (descending IoU).
    pub pairs: Vec<MatchPair<T>>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_det: Vec<usize>,
}

impl<T: Scalar> MatchResult<T> {
    pub fn iou_for_gt(&self, gt_index: usize) -> Option<T> {
        self.pairs
            .iter()
            .find(|p| p.gt_index == gt_index)
            .map(|p| p.iou)
    }

    pub fn matched_iou_sum(&self) -> T {
        self.pairs.iter().fold(T::zero(), |acc, p| acc + p.iou)
    }
}

/// Greedy matching in descending IoU order. Candidate pairs below the
/// threshold never match; ties break on lower gt index, then lower det
/// index, so the result is deterministic.
pub fn match_detections<T: Scalar>(
    gt: &[Detection<T>],
    det: &[Detection<T>],
    opts: MatchOptions<T>,
) -> MatchResult<T> {
    let mut candidates: Vec<MatchPair<T>> = Vec::new();
    for (gi, g) in gt.iter().enumerate() {
        for (di, d) in det.iter().enumerate() {
            if opts.class_aware && g.class_id != d.class_id {
                continue;
            }
            let overlap = iou(&g.bbox, &d.bbox);
            if overlap >= opts.threshold {
                candidates.push(MatchPair {
                    gt_index: gi,
                    det_index: di,
                    iou: overlap,
                });
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.iou
            .partial_cmp(&a.iou)
            .expect("IoU values are finite")
            .then(a.gt_index.cmp(&b.gt_index))
            .then(a.det_index.cmp(&b.det_index))
    });

    let mut gt_used = vec![false; gt.len()];
    let mut det_used = vec![false; det.len()];
    let mut pairs = Vec::new();
    for c in candidates {
        if gt_used[c.gt_index] || det_used[c.det_index] {
            continue;
        }
        gt_used[c.gt_index] = true;
        det_used[c.det_index] = true;
        pairs.push(c);
    }
    MatchResult {
        pairs,
        unmatched_gt: (0..gt.len()).filter(|i| !gt_used[*i]).collect(),
        unmatched_det: (0..det.len()).filter(|i| !det_used[*i]).collect(),
    }
}

/// Average over GT objects of matched IoU, with 0 contributed by each
/// unmatched GT. `None` (not 0) when the frame has no GT objects, so the
/// frame can be excluded from aggregation.
pub fn mean_iou<T: Scalar>(
    frame_gt: &[Detection<T>],
    frame_det: &[Detection<T>],
    opts: MatchOptions<T>,
) -> Option<T> {
    if frame_gt.is_empty() {
        return None;
    }
    let result = match_detections(frame_gt, frame_det, opts);
    Some(result.matched_iou_sum() / T::from_usize(frame_gt.len()))
}

/// IoU of the detection matched to this object, or 0 if nothing overlapping
/// at least the threshold exists.
pub fn object_iou<T: Scalar>(
    gt_object: &Detection<T>,
    det: &[Detection<T>],
    opts: MatchOptions<T>,
) -> T {
    match_detections(std::slice::from_ref(gt_object), det, opts)
        .iou_for_gt(0)
        .unwrap_or_else(T::zero)
}

/// Reference-frame IoU minus compressed-frame IoU. Deliberately not clamped
/// at 0: compression can accidentally improve a detection.
pub fn delta_object_iou<T: Scalar>(ref_iou: T, compressed_iou: T) -> T {
    ref_iou - compressed_iou
}

/// One per-object degradation row, ready for the JSON-Lines target file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTargetRecord {
    pub frame_id: String,
    pub object_id: String,
    pub ref_iou: f64,
    pub compressed_iou: f64,
    pub delta: f64,
    pub codec: String,
    pub qf: i32,
}

impl ObjectTargetRecord {
    pub fn new(
        frame_id: impl Into<String>,
        object_id: impl Into<String>,
        ref_iou: f64,
        compressed_iou: f64,
        codec: impl Into<String>,
        qf: i32,
    ) -> Self {
        Self {
            frame_id: frame_id.into(),
            object_id: object_id.into(),
            ref_iou,
            compressed_iou,
            delta: delta_object_iou(ref_iou, compressed_iou),
            codec: codec.into(),
            qf,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::BoundingBox;
    use proptest::prelude::*;

    fn det(x0: f64, y0: f64, x1: f64, y1: f64, class: u32) -> Detection {
        Detection::new(BoundingBox::new(x0, y0, x1, y1).unwrap(), class, 1.0).unwrap()
    }

    #[test]
    fn exact_self_match() {
        let gt = vec![det(0.0, 0.0, 10.0, 10.0, 0)];
        let result = match_detections(&gt, &gt.clone(), MatchOptions::default());
        assert_eq!(result.pairs.len(), 1);
        assert_eq!(result.pairs[0].gt_index, 0);
        assert_eq!(result.pairs[0].det_index, 0);
        assert_eq!(result.pairs[0].iou, 1.0);
    }

    #[test]
    fn missed_detection() {
        let gt = vec![det(0.0, 0.0, 10.0, 10.0, 0)];
        let result = match_detections(&gt, &[], MatchOptions::default());
        assert!(result.pairs.is_empty());
        assert_eq!(result.unmatched_gt, vec![0]);
    }

    #[test]
    fn greedy_order_is_descending_iou() {
        let gt = vec![det(0.0, 0.0, 10.0, 10.0, 0), det(20.0, 0.0, 30.0, 10.0, 0)];
        let dets = vec![det(1.0, 0.0, 11.0, 10.0, 0), det(20.0, 0.0, 30.0, 10.0, 0)];
        let result = match_detections(&gt, &dets, MatchOptions::with_threshold(0.5));
        assert_eq!(result.pairs.len(), 2);
        assert_eq!(
            (result.pairs[0].gt_index, result.pairs[0].det_index),
            (1, 1)
        );
        assert_eq!(result.pairs[0].iou, 1.0);
        assert_eq!(
            (result.pairs[1].gt_index, result.pairs[1].det_index),
            (0, 0)
        );
        assert!((result.pairs[1].iou - 9.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn class_mismatch_never_matches() {
        let gt = vec![det(0.0, 0.0, 10.0, 10.0, 0)];
        let dets = vec![det(0.0, 0.0, 10.0, 10.0, 1)];
        let result = match_detections(&gt, &dets, MatchOptions::default());
        assert!(result.pairs.is_empty());
        let mut opts = MatchOptions::default();
        opts.class_aware = false;
        assert_eq!(match_detections(&gt, &dets, opts).pairs.len(), 1);
    }

    #[test]
    fn mean_iou_perfect_frame() {
        let gt = vec![det(0.0, 0.0, 10.0, 10.0, 0), det(20.0, 0.0, 30.0, 10.0, 1)];
        assert_eq!(mean_iou(&gt, &gt.clone(), MatchOptions::default()), Some(1.0));
    }

    #[test]
    fn mean_iou_counts_misses_as_zero() {
        // one object matched at 0.8 (by hand: inter 80, union 100... use 8/10 overlap)
        let gt = vec![det(0.0, 0.0, 10.0, 10.0, 0), det(50.0, 50.0, 60.0, 60.0, 0)];
        // det covers 80% of first gt and nothing of second
        let dets = vec![det(0.0, 0.0, 10.0, 8.0, 0)];
        let got = mean_iou(&gt, &dets, MatchOptions::with_threshold(0.5)).unwrap();
        assert!((got - 0.4).abs() < 1e-12);
    }

    #[test]
    fn mean_iou_empty_gt_is_undefined() {
        let dets = vec![det(0.0, 0.0, 10.0, 10.0, 0)];
        assert_eq!(mean_iou(&[], &dets, MatchOptions::default()), None);
    }

    #[test]
    fn object_iou_zero_for_miss() {
        let gt = det(0.0, 0.0, 10.0, 10.0, 0);
        let dets = vec![det(100.0, 100.0, 110.0, 110.0, 0)];
        assert_eq!(object_iou(&gt, &dets, MatchOptions::default()), 0.0);
    }

    #[test]
    fn object_iou_above_threshold_reported() {
        // boxes with IoU exactly 0.6: 10x10 vs 10x6 + offset? use inter/union = 6/10
        let gt = det(0.0, 0.0, 10.0, 10.0, 0);
        let dets = vec![det(0.0, 0.0, 10.0, 6.0, 0)];
        let got = object_iou(&gt, &dets, MatchOptions::with_threshold(0.5));
        assert!((got - 0.6).abs() < 1e-12);
    }

    #[test]
    fn delta_examples() {
        assert!((delta_object_iou(0.9f64, 0.6) - 0.3).abs() < 1e-15);
        assert_eq!(delta_object_iou(0.42f64, 0.42), 0.0);
        assert!((delta_object_iou(0.5f64, 0.8) + 0.3).abs() < 1e-15);
    }

    #[test]
    fn record_maintains_delta_invariant() {
        let r = ObjectTargetRecord::new("f", "0", 0.9, 0.7, "jpeg", 50);
        assert!((r.delta - (r.ref_iou - r.compressed_iou)).abs() < 1e-15);
    }

    #[test]
    fn mean_iou_monotone_under_progressive_shrink() {
        let gt = vec![det(10.0, 10.0, 50.0, 50.0, 0), det(70.0, 10.0, 90.0, 40.0, 0)];
        let mut previous = f64::INFINITY;
        for step in 0..20 {
            let scale = 1.0 - 0.049 * step as f64;
            let (cx, cy) = (30.0, 30.0);
            let half_w = 20.0 * scale;
            let half_h = 20.0 * scale;
            let shrunk = det(cx - half_w, cy - half_h, cx + half_w, cy + half_h, 0);
            let dets = vec![shrunk, gt[1]];
            let value = mean_iou(&gt, &dets, MatchOptions::with_threshold(0.3)).unwrap();
            assert!(value <= previous + 1e-12);
            previous = value;
        }
    }

    /// Exhaustive optimal matching over all injective pairings; oracle for
    /// the greedy matcher on small instances.
    pub fn optimal_matched_iou_sum(
        gt: &[Detection],
        det: &[Detection],
        opts: MatchOptions,
    ) -> f64 {
        fn recurse(
            gi: usize,
            gt: &[Detection],
            det: &[Detection],
            used: &mut Vec<bool>,
            opts: &MatchOptions,
        ) -> f64 {
            if gi == gt.len() {
                return 0.0;
            }
            // option: leave this gt unmatched
            let mut best = recurse(gi + 1, gt, det, used, opts);
            for di in 0..det.len() {
                if used[di] {
                    continue;
                }
                if opts.class_aware && gt[gi].class_id != det[di].class_id {
                    continue;
                }
                let overlap = iou(&gt[gi].bbox, &det[di].bbox);
                if overlap < opts.threshold {
                    continue;
                }
                used[di] = true;
                let total = overlap + recurse(gi + 1, gt, det, used, opts);
                used[di] = false;
                if total > best {
                    best = total;
                }
            }
            best
        }
        let mut used = vec![false; det.len()];
        recurse(0, gt, det, &mut used, &opts)
    }

    proptest! {
        #[test]
        fn match_is_partial_injective(
            seeds in proptest::collection::vec((0u32..100, 0u32..100, 1u32..40, 1u32..40, 0u32..2), 0..6),
            det_seeds in proptest::collection::vec((0u32..100, 0u32..100, 1u32..40, 1u32..40, 0u32..2), 0..6),
        ) {
            let mk = |s: &(u32, u32, u32, u32, u32)| det(
                s.0 as f64, s.1 as f64,
                (s.0 + s.2) as f64, (s.1 + s.3) as f64,
                s.4,
            );
            let gt: Vec<_> = seeds.iter().map(mk).collect();
            let dets: Vec<_> = det_seeds.iter().map(mk).collect();
            let result = match_detections(&gt, &dets, MatchOptions::with_threshold(0.1));
            let mut gt_seen = std::collections::HashSet::new();
            let mut det_seen = std::collections::HashSet::new();
            for p in &result.pairs {
                prop_assert!(gt_seen.insert(p.gt_index));
                prop_assert!(det_seen.insert(p.det_index));
                prop_assert!(p.iou >= 0.1);
            }
            prop_assert_eq!(
                result.pairs.len() + result.unmatched_gt.len(),
                gt.len()
            );
            prop_assert_eq!(
                result.pairs.len() + result.unmatched_det.len(),
                dets.len()
            );
        }

        #[test]
        fn delta_is_antisymmetric(r in 0.0f64..1.0, c in 0.0f64..1.0) {
            prop_assert_eq!(delta_object_iou(r, c), -delta_object_iou(c, r));
        }
    }
}
