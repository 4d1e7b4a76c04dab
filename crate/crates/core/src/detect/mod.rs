//! Single-scale anchor-free detection head, its losses, and non-maximum suppression.

mod boxes;
mod loss;
mod nms;

pub use boxes::{ciou_loss, ciou_loss_grad, from_corners, iou, to_corners, BoxCxCy};
pub use loss::{dfl_loss, dfl_loss_grad, loss_var, total_loss, LossBreakdown};
pub use nms::{nms, rank};

use serde::{Deserialize, Serialize};

use crate::numeric::{Bound, Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result};
use boxes::{Branches, Dual};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoxCxCy,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub bbox: BoxCxCy,
    pub class_id: usize,
}

impl GroundTruthBox {
    pub fn new(bbox: BoxCxCy, class_id: usize) -> Result<Self> {
        if !(bbox[2] > 0.0 && bbox[3] > 0.0) || bbox.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("ground-truth box {bbox:?} needs finite w, h > 0")));
        }
        Ok(Self { bbox, class_id })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    pub num_classes: usize,
    /// Predict each box side as a distribution over `dfl_bins` cell offsets.
    pub dfl: bool,
    pub dfl_bins: usize,
    /// Box size (image fraction) decoded from a zero raw size.
    pub size_prior: f64,
    /// Initial class probability encoded in the classification bias.
    pub cls_prior: f64,
    pub lambda_cls: f64,
    pub lambda_box: f64,
    pub lambda_dfl: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            dfl: false,
            dfl_bins: 8,
            size_prior: 0.25,
            cls_prior: 0.01,
            lambda_cls: 1.0,
            lambda_box: 5.0,
            lambda_dfl: 1.0,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.dfl && self.dfl_bins < 2 {
            return Err(Error::Config(format!("dfl_bins must be >= 2, got {}", self.dfl_bins)));
        }
        if !(self.size_prior > 0.0 && self.size_prior <= 1.0) {
            return Err(Error::Config(format!("size_prior must be in (0, 1], got {}", self.size_prior)));
        }
        if !(self.cls_prior > 0.0 && self.cls_prior < 1.0) {
            return Err(Error::Config(format!("cls_prior must be in (0, 1), got {}", self.cls_prior)));
        }
        for (name, v) in [("lambda_cls", self.lambda_cls), ("lambda_box", self.lambda_box), ("lambda_dfl", self.lambda_dfl)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn box_channels(&self) -> usize {
        if self.dfl {
            4 * self.dfl_bins
        } else {
            4
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// `[K, Hg, Wg]`
    pub cls_logits: Tensor,
    /// `[4, Hg, Wg]` offsets, or `[4·B, Hg, Wg]` side distributions (left, top, right, bottom).
    pub box_raw: Tensor,
}

impl HeadOutput {
    pub fn grid(&self) -> (usize, usize) {
        (self.cls_logits.shape()[1], self.cls_logits.shape()[2])
    }
}

/// Two 1×1 convolution branches over backbone features.
#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub cls: (ParamId, ParamId),
    pub reg: (ParamId, ParamId),
    in_channels: usize,
    cfg: DetectConfig,
}

impl DetectionHead {
    pub fn new(store: &mut ParamStore, prefix: &str, in_channels: usize, cfg: DetectConfig, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.num_classes;
        let bias = (cfg.cls_prior / (1.0 - cfg.cls_prior)).ln();
        let cls = (
            store.add(format!("{prefix}.cls.weight"), init.fan_in(&[k, in_channels, 1, 1], in_channels)),
            store.add(format!("{prefix}.cls.bias"), Tensor::full(&[k], bias)),
        );
        let bc = cfg.box_channels();
        let reg = (
            store.add(format!("{prefix}.box.weight"), init.fan_in(&[bc, in_channels, 1, 1], in_channels)),
            store.add(format!("{prefix}.box.bias"), Tensor::zeros(&[bc])),
        );
        Ok(Self {
            cls,
            reg,
            in_channels,
            cfg,
        })
    }

    pub fn config(&self) -> &DetectConfig {
        &self.cfg
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.cls.0, self.cls.1, self.reg.0, self.reg.1]
    }

    /// `(cls_logits, box_raw)` variables.
    pub fn forward_var(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<(Var, Var)> {
        match g.shape(features) {
            [c, _, _] if *c == self.in_channels => {}
            s => {
                return Err(Error::Numeric(crate::numeric::NumericError::Dimension(format!(
                    "head built for {} channels, got features {s:?}",
                    self.in_channels
                ))))
            }
        }
        let cls = g.conv2d(features, p.var(self.cls.0), p.var(self.cls.1), 1, 0)?;
        let reg = g.conv2d(features, p.var(self.reg.0), p.var(self.reg.1), 1, 0)?;
        Ok((cls, reg))
    }
}

pub fn head_forward(head: &DetectionHead, store: &ParamStore, features: &Tensor) -> Result<HeadOutput> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(features.clone());
    let (c, b) = head.forward_var(&mut g, &p, x)?;
    Ok(HeadOutput {
        cls_logits: g.value(c).clone(),
        box_raw: g.value(b).clone(),
    })
}

/// Smallest decoded side length, keeping boxes valid when a side collapses.
pub const MIN_BOX_SIZE: f64 = 1e-6;

/// Decoded box of one cell. In offset mode the duals differentiate with respect to the
/// four raw channels; in distribution mode with respect to the four side expectations,
/// which are returned together with the per-side softmax.
pub(crate) struct CellBox {
    pub bbox: [Dual; 4],
    pub sides: Option<[(f64, Vec<f64>); 4]>,
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub(crate) fn decode_cell(raw: &[f64], i: usize, j: usize, hg: usize, wg: usize, cfg: &DetectConfig, br: &Branches) -> CellBox {
    let (hf, wf) = (hg as f64, wg as f64);
    if !cfg.dfl {
        let cx = (Dual::cst(j as f64) + Dual::var(raw[0], 0).sigmoid()).scale(1.0 / wf);
        let cy = (Dual::cst(i as f64) + Dual::var(raw[1], 1).sigmoid()).scale(1.0 / hf);
        let size = |k: usize| {
            let s = Dual::var(raw[k], k).exp().scale(cfg.size_prior);
            br.max(br.min(s, Dual::cst(1.0)), Dual::cst(MIN_BOX_SIZE))
        };
        let w = size(2);
        let h = size(3);
        return CellBox {
            bbox: [cx, cy, w, h],
            sides: None,
        };
    }
    let b = cfg.dfl_bins;
    let sides: [(f64, Vec<f64>); 4] = std::array::from_fn(|s| {
        let p = softmax(&raw[s * b..(s + 1) * b]);
        let e = p.iter().enumerate().map(|(k, pk)| k as f64 * pk).sum();
        (e, p)
    });
    let ccx = (j as f64 + 0.5) / wf;
    let ccy = (i as f64 + 0.5) / hf;
    let clip = |v: Dual| br.max(br.min(v, Dual::cst(1.0)), Dual::cst(0.0));
    let x1 = clip(Dual::cst(ccx) - Dual::var(sides[0].0, 0).scale(1.0 / wf));
    let y1 = clip(Dual::cst(ccy) - Dual::var(sides[1].0, 1).scale(1.0 / hf));
    let x2 = clip(Dual::cst(ccx) + Dual::var(sides[2].0, 2).scale(1.0 / wf));
    let y2 = clip(Dual::cst(ccy) + Dual::var(sides[3].0, 3).scale(1.0 / hf));
    let w = br.max(x2 - x1, Dual::cst(MIN_BOX_SIZE));
    let h = br.max(y2 - y1, Dual::cst(MIN_BOX_SIZE));
    CellBox {
        bbox: [(x1 + x2).scale(0.5), (y1 + y2).scale(0.5), w, h],
        sides: Some(sides),
    }
}

/// Raw box channels of one cell.
pub(crate) fn cell_raw(box_raw: &Tensor, i: usize, j: usize) -> Vec<f64> {
    let (ch, hg, wg) = (box_raw.shape()[0], box_raw.shape()[1], box_raw.shape()[2]);
    (0..ch).map(|c| box_raw.data()[(c * hg + i) * wg + j]).collect()
}

fn open_unit(p: f64) -> f64 {
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// One candidate per cell: best class, its probability, and the decoded box.
pub fn decode(out: &HeadOutput, cfg: &DetectConfig) -> Vec<Detection> {
    let (k, hg, wg) = (out.cls_logits.shape()[0], out.cls_logits.shape()[1], out.cls_logits.shape()[2]);
    let mut dets = Vec::with_capacity(hg * wg);
    for i in 0..hg {
        for j in 0..wg {
            let (class_id, logit) = (0..k)
                .map(|c| (c, out.cls_logits.data()[(c * hg + i) * wg + j]))
                .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
            let cb = decode_cell(&cell_raw(&out.box_raw, i, j), i, j, hg, wg, cfg, &Branches::default());
            dets.push(Detection {
                bbox: cb.bbox.map(|d| d.v),
                class_id,
                score: open_unit(crate::numeric::ops::sigmoid(logit)),
            });
        }
    }
    dets
}

/// Grid cell `(row, col)` containing a box center.
pub fn assigned_cell(b: &BoxCxCy, hg: usize, wg: usize) -> (usize, usize) {
    let idx = |v: f64, n: usize| ((v * n as f64).floor().max(0.0) as usize).min(n - 1);
    (idx(b[1], hg), idx(b[0], wg))
}

pub fn format_detections(dets: &[Detection]) -> String {
    dets.iter()
        .map(|d| {
            format!(
                "{} {} {} {} {} {}\n",
                d.class_id, d.score, d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3]
            )
        })
        .collect()
}

pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Config(format!("malformed detection line: {line:?}"));
            if f.len() != 6 {
                return Err(bad());
            }
            let nums: Vec<f64> = f[1..].iter().map(|s| s.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
            Ok(Detection {
                class_id: f[0].parse().map_err(|_| bad())?,
                score: nums[0],
                bbox: [nums[1], nums[2], nums[3], nums[4]],
            })
        })
        .collect()
}
