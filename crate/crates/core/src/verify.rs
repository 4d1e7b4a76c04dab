//! Finite-difference gradient suite over every differentiable stage, used by the
//! `gradcheck` command and the acceptance run.

use std::sync::Arc;

use crate::cbam::{CbamConfig, CbamParams};
use crate::detect::{ciou_loss, ciou_loss_grad, loss_var, DetectConfig, DetectionHead, GroundTruthBox};
use crate::harness::{Model, ModelConfig, Variant};
use crate::numeric::{gradcheck_with, relative_error, Bound, GradCheckOptions, GradCheckReport, Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::sampler::{sample_var, PaddingPolicy};
use crate::tps::{fit_tps, grid_basis, make_grid_var, ControlPointSet};
use crate::{Error, Result};

pub const GRADIENT_OPS: [&str; 7] = ["tps_grid", "sampler", "channel_attention", "spatial_attention", "ciou", "head", "model"];

pub fn check_op(op: &str, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let opts = GradCheckOptions { seed, ..opts.clone() };
    let mut init = Init::new(seed ^ 0x5eed);
    let mut report = match op {
        "tps_grid" => tps_grid(&mut init, &opts),
        "sampler" => sampler(&mut init, &opts),
        "channel_attention" => attention(&mut init, &opts, false),
        "spatial_attention" => attention(&mut init, &opts, true),
        "ciou" => ciou(&mut init, &opts),
        "head" => head(&mut init, &opts),
        "model" => model(&mut init, seed, &opts),
        other => Err(Error::Config(format!("unknown gradient op `{other}`; expected one of {GRADIENT_OPS:?}"))),
    }?;
    report.op_name = format!("{op}[seed {seed}]");
    Ok(report)
}

fn tps_grid(init: &mut Init, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let src: Vec<[f64; 2]> = (0..6).map(|_| {
        let p = init.uniform(&[2], -0.9, 0.9);
        [p.data()[0], p.data()[1]]
    }).collect();
    let dst: Vec<[f64; 2]> = src.iter().map(|s| {
        let d = init.uniform(&[2], -0.2, 0.2);
        [s[0] + d.data()[0], s[1] + d.data()[1]]
    }).collect();
    let params = fit_tps(&ControlPointSet::new(src.clone(), dst)?, 0.0)?;
    let basis = Arc::new(grid_basis(&src, 6, 7)?);
    let proj = init.normal(&[6, 7, 2]);
    gradcheck_with(
        "tps_grid",
        |g, v| {
            let grid = make_grid_var(g, &basis, 6, 7, v[0])?;
            let sq = g.square(grid);
            Ok::<_, Error>(g.dot_const(sq, &proj)?)
        },
        &[params.coefficients()],
        opts,
    )
}

/// Sampling points kept `margin` away from pixel centres, where bilinear weights kink.
fn interior_grid(init: &mut Init, n: usize, h: usize, w: usize, margin: f64) -> Tensor {
    let mut coords = Vec::with_capacity(2 * n);
    for _ in 0..n {
        for size in [w, h] {
            let cell = init.uniform(&[1], 0.0, (size - 1) as f64).data()[0].floor();
            let frac = init.uniform(&[1], margin, 1.0 - margin).data()[0];
            coords.push(2.0 * (cell + frac) / (size as f64 - 1.0) - 1.0);
        }
    }
    Tensor::new(&[1, n, 2], coords).expect("shape matches data")
}

fn sampler(init: &mut Init, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let x = init.normal(&[2, 5, 6]);
    let grid = interior_grid(init, 7, 5, 6, 1e-3);
    let proj = init.normal(&[2, 1, 7]);
    gradcheck_with(
        "sampler",
        |g, v| {
            let y = sample_var(g, v[0], v[1], PaddingPolicy::Zeros)?;
            Ok::<_, Error>(g.dot_const(y, &proj)?)
        },
        &[x, grid],
        opts,
    )
}

/// Checks `f` with respect to one leading input and every parameter in `ids`.
fn with_params<F>(name: &str, store: &ParamStore, ids: &[ParamId], lead: Vec<Tensor>, opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound, &[Var]) -> Result<Var>,
{
    let k = lead.len();
    let mut inputs = lead;
    inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
    gradcheck_with(
        name,
        |g, v| {
            let mut b = store.bind(g);
            for (&id, &var) in ids.iter().zip(&v[k..]) {
                b.replace(id, var);
            }
            f(g, &b, &v[..k])
        },
        &inputs,
        opts,
    )
}

fn attention(init: &mut Init, opts: &GradCheckOptions, spatial: bool) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let p = CbamParams::new(&mut store, "cbam", 8, &CbamConfig::default(), init)?;
    let x = init.normal(&[8, 5, 5]);
    let apply = |g: &mut Graph, b: &Bound, x: Var| {
        if spatial {
            p.spatial_attention_var(g, b, x)
        } else {
            p.channel_attention_var(g, b, x)
        }
    };
    let shape = {
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let v = g.leaf(x.clone());
        let y = apply(&mut g, &b, v)?;
        g.value(y).shape().to_vec()
    };
    let proj = init.normal(&shape);
    let opts = GradCheckOptions { max_coords_per_input: Some(60), ..opts.clone() };
    with_params("attention", &store, &p.ids(), vec![x], &opts, |g, b, v| {
        let y = apply(g, b, v[0])?;
        Ok(g.dot_const(y, &proj)?)
    })
}

/// CIoU is differentiated in forward mode, so it is compared against central differences
/// of the loss value directly.
fn ciou(init: &mut Init, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let r = init.uniform(&[8], 0.0, 1.0);
    let r = r.data();
    let gt = [0.3 + 0.4 * r[0], 0.3 + 0.4 * r[1], 0.1 + 0.3 * r[2], 0.1 + 0.3 * r[3]];
    let p = [gt[0] + 0.1 * (r[4] - 0.5), gt[1] + 0.1 * (r[5] - 0.5), gt[2] * (0.7 + 0.6 * r[6]), gt[3] * (0.7 + 0.6 * r[7])];
    let (_, grad) = ciou_loss_grad(&p, &gt)?;
    let h = opts.step;
    let mut worst: f64 = 0.0;
    for i in 0..4 {
        let (mut a, mut b) = (p, p);
        a[i] += h;
        b[i] -= h;
        let num = (ciou_loss(&a, &gt)? - ciou_loss(&b, &gt)?) / (2.0 * h);
        worst = worst.max(relative_error(grad[i], num));
    }
    Ok(GradCheckReport {
        op_name: "ciou".into(),
        max_relative_error: worst,
        tolerance: opts.tolerance,
        pass: worst <= opts.tolerance,
        per_input_errors: vec![worst],
        checked: 4,
        skipped: 0,
        inconclusive: false,
    })
}

fn gts() -> Vec<GroundTruthBox> {
    vec![
        GroundTruthBox::new([0.3, 0.35, 0.3, 0.2], 0).expect("valid box"),
        GroundTruthBox::new([0.62, 0.7, 0.2, 0.4], 2).expect("valid box"),
    ]
}

fn head(init: &mut Init, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let cfg = DetectConfig::default();
    let mut store = ParamStore::new();
    let head = DetectionHead::new(&mut store, "head", 6, cfg.clone(), init)?;
    let feat = init.normal(&[6, 4, 4]);
    let gts = gts();
    let opts = GradCheckOptions { max_coords_per_input: Some(40), ..opts.clone() };
    with_params("head", &store, &head.ids(), vec![feat], &opts, |g, b, v| {
        let (cls, reg) = head.forward_var(g, b, v[0])?;
        Ok(loss_var(g, cls, reg, &gts, &cfg)?.0)
    })
}

/// Whole CBAM-STN-TPS detector at a reduced image size, with a nonzero STN head so the
/// warp is exercised.
fn model(init: &mut Init, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let cfg = ModelConfig { image_size: 16, loc_downsample: 1, ..ModelConfig::default() };
    let img = init.uniform(&[3, 16, 16], 0.0, 1.0);
    let mut m = Model::new(Variant::CbamStnTps, &cfg, seed)?;
    let (hw, _) = m.stn().expect("variant has an STN").net().head();
    let t = init.uniform(m.store().get(hw).shape(), -0.3, 0.3);
    *m.store_mut().get_mut(hw) = t;
    let ids: Vec<ParamId> = m.store().ids().collect();
    let gts = [GroundTruthBox::new([0.4, 0.6, 0.3, 0.2], 1)?];
    let opts = GradCheckOptions { max_coords_per_input: Some(6), ..opts.clone() };
    with_params("model", m.store(), &ids, Vec::new(), &opts, |g, b, _| {
        let x = g.constant(img.clone());
        let (c, r) = m.forward_var(g, b, x)?;
        Ok(loss_var(g, c, r, &gts, m.detect_config())?.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_one_seed() {
        for op in GRADIENT_OPS {
            let r = check_op(op, 0, &GradCheckOptions::default()).unwrap();
            assert!(r.pass && !r.inconclusive, "{r}");
        }
        assert!(check_op("nope", 0, &GradCheckOptions::default()).is_err());
    }
}
