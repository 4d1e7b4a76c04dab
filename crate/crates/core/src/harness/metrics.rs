//! Detection metrics: greedy matching, precision/recall at an operating point,
//! all-point interpolated AP, confusion matrix, and exact-scene accuracy.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::detect::{iou, rank, Detection, GroundTruthBox};
use crate::numeric::Tensor;
use crate::Result;

/// Detections at or above this score count toward precision, recall and the confusion matrix.
pub const SCORE_THRESHOLD: f64 = 0.25;
pub const IOU_MATCH: f64 = 0.5;

/// Anything that turns an image into scored boxes.
pub trait Detector {
    fn detect(&self, image: &Tensor) -> Result<Vec<Detection>>;
}

impl Detector for super::Model {
    fn detect(&self, image: &Tensor) -> Result<Vec<Detection>> {
        super::Model::detect(self, image)
    }
}

/// Greedy one-to-one matching in rank order. Each detection takes the unmatched gt with
/// the highest IoU (lowest index on ties) if that IoU reaches `iou_threshold`.
/// Returns, for each detection in input order, the matched gt index.
pub fn greedy_match(dets: &[Detection], gts: &[GroundTruthBox], iou_threshold: f64, class_aware: bool) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| rank(&dets[a], &dets[b]).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for di in order {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] || (class_aware && g.class_id != d.class_id) {
                continue;
            }
            let o = iou(&d.bbox, &g.bbox);
            if o >= iou_threshold && best.map_or(true, |(_, b)| o > b) {
                best = Some((gi, o));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            out[di] = Some(gi);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Class-aware counts for one image at the operating point.
pub fn image_counts(dets: &[Detection], gts: &[GroundTruthBox], iou_threshold: f64, score_threshold: f64) -> Counts {
    let kept: Vec<Detection> = dets.iter().copied().filter(|d| d.score >= score_threshold).collect();
    let m = greedy_match(&kept, gts, iou_threshold, true);
    let tp = m.iter().flatten().count();
    Counts {
        tp,
        fp: kept.len() - tp,
        fn_: gts.len() - tp,
    }
}

/// Average precision per class and their mean over classes that have ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    pub map: f64,
    /// `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
}

/// Area under the monotone precision envelope. `hits` lists groups of tied detections
/// in descending score order as `(detections, true positives)`.
fn envelope_area(hits: &[(usize, usize)], num_gt: usize) -> f64 {
    let mut pts = Vec::with_capacity(hits.len());
    let (mut n, mut tp) = (0usize, 0usize);
    for &(dn, dtp) in hits {
        n += dn;
        tp += dtp;
        pts.push((tp, tp as f64 / n as f64));
    }
    // sweep from the lowest threshold up, carrying the running max of precision
    let mut ap = 0.0;
    let mut env: f64 = 0.0;
    for k in (0..pts.len()).rev() {
        env = env.max(pts[k].1);
        let prev_tp = if k == 0 { 0 } else { pts[k - 1].0 };
        if pts[k].0 > prev_tp {
            ap += (pts[k].0 - prev_tp) as f64 / num_gt as f64 * env;
        }
    }
    ap
}

/// All-point interpolated AP at `iou_threshold`. Tied scores form a single threshold.
pub fn compute_ap(all_detections: &[Vec<Detection>], all_gts: &[Vec<GroundTruthBox>], iou_threshold: f64, num_classes: usize) -> ApResult {
    assert_eq!(all_detections.len(), all_gts.len(), "one detection list per image");
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let num_gt: usize = all_gts.iter().map(|g| g.iter().filter(|b| b.class_id == c).count()).sum();
        if num_gt == 0 {
            per_class.push(None);
            continue;
        }
        // (image, detection) of this class, best first
        let mut cand: Vec<(usize, Detection)> = all_detections
            .iter()
            .enumerate()
            .flat_map(|(i, ds)| ds.iter().filter(|d| d.class_id == c).map(move |d| (i, *d)))
            .collect();
        cand.sort_by(|a, b| rank(&a.1, &b.1).then(a.0.cmp(&b.0)));
        let mut taken: Vec<Vec<bool>> = all_gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut hits: Vec<(usize, usize)> = Vec::new();
        let mut last_score = f64::NAN;
        for (img, d) in &cand {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in all_gts[*img].iter().enumerate() {
                if taken[*img][gi] || g.class_id != c {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox);
                if o >= iou_threshold && best.map_or(true, |(_, b)| o > b) {
                    best = Some((gi, o));
                }
            }
            let tp = match best {
                Some((gi, _)) => {
                    taken[*img][gi] = true;
                    1
                }
                None => 0,
            };
            if d.score.total_cmp(&last_score) == Ordering::Equal {
                let h = hits.last_mut().expect("tie follows a detection");
                h.0 += 1;
                h.1 += tp;
            } else {
                hits.push((1, tp));
                last_score = d.score;
            }
        }
        per_class.push(Some(envelope_area(&hits, num_gt)));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    ApResult { map, per_class }
}

/// mAP over classes present in the ground truth.
pub fn compute_map(all_detections: &[Vec<Detection>], all_gts: &[Vec<GroundTruthBox>], iou_threshold: f64) -> f64 {
    let k = all_detections
        .iter()
        .flatten()
        .map(|d| d.class_id + 1)
        .chain(all_gts.iter().flatten().map(|g| g.class_id + 1))
        .max()
        .unwrap_or(0);
    compute_ap(all_detections, all_gts, iou_threshold, k).map
}

/// `(K+1)²` counts, rows are ground truth, columns predictions, index `K` is background.
/// Uses class-agnostic matching over detections at the operating point.
pub fn confusion_matrix(
    all_detections: &[Vec<Detection>],
    all_gts: &[Vec<GroundTruthBox>],
    num_classes: usize,
    iou_threshold: f64,
    score_threshold: f64,
) -> Vec<Vec<usize>> {
    let bg = num_classes;
    let mut m = vec![vec![0usize; num_classes + 1]; num_classes + 1];
    for (dets, gts) in all_detections.iter().zip(all_gts) {
        let kept: Vec<Detection> = dets.iter().copied().filter(|d| d.score >= score_threshold).collect();
        let matched = greedy_match(&kept, gts, iou_threshold, false);
        let mut gt_used = vec![false; gts.len()];
        for (d, mg) in kept.iter().zip(&matched) {
            match mg {
                Some(gi) => {
                    gt_used[*gi] = true;
                    m[gts[*gi].class_id][d.class_id] += 1;
                }
                None => m[bg][d.class_id] += 1,
            }
        }
        for (g, used) in gts.iter().zip(gt_used) {
            if !used {
                m[g.class_id][bg] += 1;
            }
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Exact-scene accuracy: fraction of images with no false positive and no false negative.
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub f1: f64,
    /// Wall-clock; excluded from determinism comparisons.
    pub mean_inference_ms: f64,
    /// NaN-free: classes without ground truth report 0 and are listed in `absent_classes`.
    pub per_class_ap: Vec<f64>,
    pub absent_classes: Vec<usize>,
    pub false_positive_count: usize,
    pub true_positive_count: usize,
    pub false_negative_count: usize,
    pub images: usize,
    /// Scenes dropped because augmentation removed every label.
    pub skipped_images: usize,
}

impl MetricsReport {
    /// A copy with the wall-clock field zeroed, for equality checks across reruns.
    pub fn without_timing(&self) -> Self {
        Self {
            mean_inference_ms: 0.0,
            ..self.clone()
        }
    }

    /// Metric columns shared by reports and tables, in display order.
    pub fn scalar_metrics(&self) -> [(&'static str, f64); 5] {
        [
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("recall", self.recall),
            ("map50", self.map50),
            ("f1", self.f1),
        ]
    }
}

pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Metrics from per-image candidate lists. Precision is 0 when nothing is detected.
pub fn report_from_detections(
    all_detections: &[Vec<Detection>],
    all_gts: &[Vec<GroundTruthBox>],
    num_classes: usize,
    iou_threshold: f64,
    score_threshold: f64,
) -> MetricsReport {
    let mut total = Counts::default();
    let mut exact = 0;
    for (d, g) in all_detections.iter().zip(all_gts) {
        let c = image_counts(d, g, iou_threshold, score_threshold);
        total.tp += c.tp;
        total.fp += c.fp;
        total.fn_ += c.fn_;
        if c.fp == 0 && c.fn_ == 0 {
            exact += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b > 0 { a as f64 / b as f64 } else { 0.0 };
    let precision = ratio(total.tp, total.tp + total.fp);
    let recall = ratio(total.tp, total.tp + total.fn_);
    let ap = compute_ap(all_detections, all_gts, iou_threshold, num_classes);
    MetricsReport {
        accuracy: ratio(exact, all_gts.len()),
        precision,
        recall,
        map50: ap.map,
        f1: f1_score(precision, recall),
        mean_inference_ms: 0.0,
        per_class_ap: ap.per_class.iter().map(|a| a.unwrap_or(0.0)).collect(),
        absent_classes: ap.per_class.iter().enumerate().filter(|(_, a)| a.is_none()).map(|(c, _)| c).collect(),
        false_positive_count: total.fp,
        true_positive_count: total.tp,
        false_negative_count: total.fn_,
        images: all_gts.len(),
        skipped_images: 0,
    }
}
