use std::time::Instant;

use rayon::prelude::*;

use super::augment::{augment, AugmentationSpec};
use super::dataset::{derive_seed, stream, with_pool};
use super::metrics::{report_from_detections, Detector, MetricsReport, IOU_MATCH, SCORE_THRESHOLD};
use super::scene::Scene;
use crate::detect::{Detection, GroundTruthBox};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub augmentation: AugmentationSpec,
    /// Root of the per-scene augmentation draws.
    pub seed: u64,
    pub iou_match: f64,
    pub score_threshold: f64,
    pub num_classes: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            augmentation: AugmentationSpec::default(),
            seed: 0,
            iou_match: IOU_MATCH,
            score_threshold: SCORE_THRESHOLD,
            num_classes: super::scene::NUM_CLASSES,
        }
    }
}

/// Raw per-image outputs of an evaluation pass, kept for confusion matrices and PR curves.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutputs {
    pub detections: Vec<Vec<Detection>>,
    pub labels: Vec<Vec<GroundTruthBox>>,
    pub skipped: usize,
    pub mean_inference_ms: f64,
}

pub fn run_detector<D: Detector + Sync>(detector: &D, data: &[Scene], opts: &EvalOptions) -> Result<EvalOutputs> {
    if data.is_empty() {
        return Err(Error::Config("evaluation needs at least one scene".into()));
    }
    opts.augmentation.validate()?;
    let per_item: Vec<Option<(Vec<Detection>, Vec<GroundTruthBox>, f64)>> = with_pool(|| {
        data.par_iter()
            .enumerate()
            .map(|(i, s)| {
                let seed = derive_seed(opts.seed, stream::AUGMENT, i as u64);
                let Some(aug) = augment(&s.image, &s.labels, &opts.augmentation, seed)? else {
                    return Ok(None);
                };
                let start = Instant::now();
                let dets = detector.detect(&aug.image)?;
                let ms = start.elapsed().as_secs_f64() * 1e3;
                Ok(Some((dets, aug.labels, ms)))
            })
            .collect::<Result<_>>()
    })?;
    let skipped = per_item.iter().filter(|x| x.is_none()).count();
    let mut out = EvalOutputs {
        detections: Vec::new(),
        labels: Vec::new(),
        skipped,
        mean_inference_ms: 0.0,
    };
    let mut total_ms = 0.0;
    for (d, l, ms) in per_item.into_iter().flatten() {
        out.detections.push(d);
        out.labels.push(l);
        total_ms += ms;
    }
    if !out.labels.is_empty() {
        out.mean_inference_ms = total_ms / out.labels.len() as f64;
    }
    Ok(out)
}

/// Metrics of `detector` on `data` under the given test-time augmentation.
pub fn evaluate<D: Detector + Sync>(detector: &D, data: &[Scene], opts: &EvalOptions) -> Result<MetricsReport> {
    let out = run_detector(detector, data, opts)?;
    Ok(report_from_outputs(&out, opts))
}

pub fn report_from_outputs(out: &EvalOutputs, opts: &EvalOptions) -> MetricsReport {
    let mut r = report_from_detections(&out.detections, &out.labels, opts.num_classes, opts.iou_match, opts.score_threshold);
    r.mean_inference_ms = out.mean_inference_ms;
    r.skipped_images = out.skipped;
    r
}
