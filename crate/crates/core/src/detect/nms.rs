use std::cmp::Ordering;

use super::{iou, Detection};

/// Score descending, then lower class, then lexicographically smaller box.
pub fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then_with(|| {
            a.bbox
                .iter()
                .zip(&b.bbox)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// Greedy per-class suppression. Detections scoring below `score_threshold` are
/// discarded first; the result is in rank order.
pub fn nms(dets: &[Detection], iou_threshold: f64, score_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().filter(|d| d.score >= score_threshold).collect();
    order.sort_by(|a, b| rank(a, b));
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}
