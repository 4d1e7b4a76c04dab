//! Classification, box and distribution losses with one-cell target assignment.

use crate::numeric::{Backward, Graph, Tensor, Var};
use crate::{Error, Result};

use super::boxes::{ciou_dual, Branches};
use super::{assigned_cell, cell_raw, decode_cell, softmax, DetectConfig, GroundTruthBox, HeadOutput};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub bbox: f64,
    pub dfl: f64,
    /// Cells carrying a box target; the normalizer is `max(1, assigned)`.
    pub assigned: usize,
}

/// Cross-entropy against the two bins bracketing `target`.
pub fn dfl_loss(logits: &[f64], target: f64) -> Result<f64> {
    Ok(dfl_loss_grad(logits, target)?.0)
}

pub fn dfl_loss_grad(logits: &[f64], target: f64) -> Result<(f64, Vec<f64>)> {
    let b = logits.len();
    if b < 2 {
        return Err(Error::Domain(format!("need at least 2 bins, got {b}")));
    }
    if !(target >= 0.0 && target <= (b - 1) as f64) {
        return Err(Error::Domain(format!("target {target} outside [0, {}]", b - 1)));
    }
    let lo = target.floor() as usize;
    let hi = target.ceil() as usize;
    let (w_lo, w_hi) = if lo == hi { (1.0, 0.0) } else { (hi as f64 - target, target - lo as f64) };
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    let loss = w_lo * (lse - logits[lo]) + w_hi * (lse - logits[hi]);
    let mut grad = softmax(logits);
    grad[lo] -= w_lo;
    grad[hi] -= w_hi;
    Ok((loss, grad))
}

/// `softplus(x) − x·t`, the logistic loss in a stable form.
fn bce_logits(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

struct Evaluated {
    parts: LossBreakdown,
    d_cls: Vec<f64>,
    d_box: Vec<f64>,
    branches: u64,
}

fn check_head(cls: &Tensor, reg: &Tensor, cfg: &DetectConfig) -> Result<(usize, usize, usize)> {
    let bad = |what: String| Error::Numeric(crate::numeric::NumericError::Dimension(what));
    let (k, hg, wg) = match cls.shape() {
        &[k, h, w] if h > 0 && w > 0 => (k, h, w),
        s => return Err(bad(format!("class logits must be [K,Hg,Wg], got {s:?}"))),
    };
    if k != cfg.num_classes {
        return Err(bad(format!("{k} class maps for {} classes", cfg.num_classes)));
    }
    if reg.shape() != [cfg.box_channels(), hg, wg] {
        return Err(bad(format!("box map {:?} does not match a {hg}x{wg} grid", reg.shape())));
    }
    Ok((k, hg, wg))
}

fn evaluate(cls: &Tensor, reg: &Tensor, gts: &[GroundTruthBox], cfg: &DetectConfig) -> Result<Evaluated> {
    let (k, hg, wg) = check_head(cls, reg, cfg)?;
    let hw = hg * wg;
    let mut targets = vec![0.0; k * hw];
    let mut box_target: Vec<Option<usize>> = vec![None; hw];
    for (n, gt) in gts.iter().enumerate() {
        if gt.class_id >= k {
            return Err(Error::Domain(format!("ground-truth class {} with {k} classes", gt.class_id)));
        }
        let (i, j) = assigned_cell(&gt.bbox, hg, wg);
        targets[gt.class_id * hw + i * wg + j] = 1.0;
        box_target[i * wg + j].get_or_insert(n);
    }
    let assigned = box_target.iter().filter(|t| t.is_some()).count();
    let norm = 1.0 / assigned.max(1) as f64;

    let mut cls_sum = 0.0;
    let mut d_cls = vec![0.0; k * hw];
    for ((x, t), d) in cls.data().iter().zip(&targets).zip(d_cls.iter_mut()) {
        cls_sum += bce_logits(*x, *t);
        *d = cfg.lambda_cls * norm * (crate::numeric::ops::sigmoid(*x) - t);
    }

    let mut box_sum = 0.0;
    let mut dfl_sum = 0.0;
    let mut d_box = vec![0.0; reg.len()];
    let br = Branches::default();
    for (cell, gt_idx) in box_target.iter().enumerate() {
        let Some(n) = *gt_idx else { continue };
        let gt = &gts[n];
        let (i, j) = (cell / wg, cell % wg);
        let raw = cell_raw(reg, i, j);
        let cb = decode_cell(&raw, i, j, hg, wg, cfg, &br);
        let l = ciou_dual(cb.bbox, &gt.bbox, &br);
        box_sum += l.v;
        let scale = cfg.lambda_box * norm;
        match &cb.sides {
            None => {
                for (c, dl) in l.d.iter().enumerate() {
                    d_box[(c * hg + i) * wg + j] += scale * dl;
                }
            }
            Some(sides) => {
                let b = cfg.dfl_bins;
                let g = super::to_corners(&gt.bbox);
                let (ccx, ccy) = ((j as f64 + 0.5) / wg as f64, (i as f64 + 0.5) / hg as f64);
                let dist = [(ccx - g[0]) * wg as f64, (ccy - g[1]) * hg as f64, (g[2] - ccx) * wg as f64, (g[3] - ccy) * hg as f64];
                let top = (b - 1) as f64;
                for (s, (e, p)) in sides.iter().enumerate() {
                    let t = dist[s].clamp(0.0, top);
                    let (dl, dgrad) = dfl_loss_grad(&raw[s * b..(s + 1) * b], t)?;
                    dfl_sum += dl;
                    for (kb, pk) in p.iter().enumerate() {
                        let ch = s * b + kb;
                        let from_box = scale * l.d[s] * pk * (kb as f64 - e);
                        let from_dfl = cfg.lambda_dfl * norm * dgrad[kb];
                        d_box[(ch * hg + i) * wg + j] += from_box + from_dfl;
                    }
                }
            }
        }
    }
    let total = norm * (cfg.lambda_cls * cls_sum + cfg.lambda_box * box_sum + cfg.lambda_dfl * dfl_sum);
    Ok(Evaluated {
        parts: LossBreakdown {
            total,
            cls: cls_sum,
            bbox: box_sum,
            dfl: dfl_sum,
            assigned,
        },
        d_cls,
        d_box,
        branches: br.code(),
    })
}

/// Normalized loss `(λ_cls·ΣBCE + λ_box·ΣCIoU + λ_dfl·ΣDFL) / max(1, assigned cells)`.
/// The breakdown reports the unnormalized sums.
pub fn total_loss(head: &HeadOutput, gts: &[GroundTruthBox], cfg: &DetectConfig) -> Result<LossBreakdown> {
    Ok(evaluate(&head.cls_logits, &head.box_raw, gts, cfg)?.parts)
}

/// Differentiable loss over the head's `(cls_logits, box_raw)` variables.
pub fn loss_var(g: &mut Graph, cls: Var, reg: Var, gts: &[GroundTruthBox], cfg: &DetectConfig) -> Result<(Var, LossBreakdown)> {
    let ev = evaluate(g.value(cls), g.value(reg), gts, cfg)?;
    if g.tracks_branches() {
        g.note_branch(ev.branches);
    }
    let out = g.push(
        Tensor::scalar(ev.parts.total),
        &[cls, reg],
        Box::new(LossBack {
            d_cls: ev.d_cls,
            d_box: ev.d_box,
        }),
    );
    Ok((out, ev.parts))
}

struct LossBack {
    d_cls: Vec<f64>,
    d_box: Vec<f64>,
}

impl Backward for LossBack {
    fn backward(&self, g: &[f64], _: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let s = g[0];
        vec![
            needs[0].then(|| self.d_cls.iter().map(|v| v * s).collect()),
            needs[1].then(|| self.d_box.iter().map(|v| v * s).collect()),
        ]
    }
}
