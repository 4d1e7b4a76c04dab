//! Box overlap measures on `(cx, cy, w, h)` boxes.

use std::f64::consts::PI;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::{Error, Result};

/// `(cx, cy, w, h)` in normalized image units.
pub type BoxCxCy = [f64; 4];

pub fn to_corners(b: &BoxCxCy) -> [f64; 4] {
    [b[0] - 0.5 * b[2], b[1] - 0.5 * b[3], b[0] + 0.5 * b[2], b[1] + 0.5 * b[3]]
}

pub fn from_corners(c: &[f64; 4]) -> BoxCxCy {
    [0.5 * (c[0] + c[2]), 0.5 * (c[1] + c[3]), c[2] - c[0], c[3] - c[1]]
}

pub fn iou(a: &BoxCxCy, b: &BoxCxCy) -> f64 {
    let (p, q) = (to_corners(a), to_corners(b));
    let iw = (p[2].min(q[2]) - p[0].max(q[0])).max(0.0);
    let ih = (p[3].min(q[3]) - p[1].max(q[1])).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Forward-mode dual number carrying derivatives with respect to four inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Dual {
    pub v: f64,
    pub d: [f64; 4],
}

impl Dual {
    pub fn cst(v: f64) -> Self {
        Self { v, d: [0.0; 4] }
    }

    pub fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; 4];
        d[i] = 1.0;
        Self { v, d }
    }

    fn map(self, v: f64, dv: f64) -> Self {
        Self {
            v,
            d: self.d.map(|x| x * dv),
        }
    }

    pub fn atan(self) -> Self {
        self.map(self.v.atan(), 1.0 / (1.0 + self.v * self.v))
    }

    pub fn exp(self) -> Self {
        let e = self.v.exp();
        self.map(e, e)
    }

    pub fn sigmoid(self) -> Self {
        let s = crate::numeric::ops::sigmoid(self.v);
        self.map(s, s * (1.0 - s))
    }

    pub fn sq(self) -> Self {
        self * self
    }

    pub fn scale(self, a: f64) -> Self {
        self.map(self.v * a, a)
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            d: std::array::from_fn(|i| self.d[i] + o.d[i]),
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            d: std::array::from_fn(|i| self.d[i] - o.d[i]),
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: std::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]),
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.v;
        Dual {
            v: self.v * inv,
            d: std::array::from_fn(|i| (self.d[i] - self.v * inv * o.d[i]) * inv),
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        self.scale(-1.0)
    }
}

/// Records which side of every comparison was taken, so callers can detect kinks.
#[derive(Debug, Default, Clone)]
pub(crate) struct Branches(std::cell::Cell<u64>);

impl Branches {
    pub fn code(&self) -> u64 {
        self.0.get()
    }

    fn push(&self, bit: bool) {
        self.0.set(self.0.get().rotate_left(1) ^ bit as u64);
    }

    pub fn max(&self, a: Dual, b: Dual) -> Dual {
        let pick = a.v >= b.v;
        self.push(pick);
        if pick {
            a
        } else {
            b
        }
    }

    pub fn min(&self, a: Dual, b: Dual) -> Dual {
        let pick = a.v <= b.v;
        self.push(pick);
        if pick {
            a
        } else {
            b
        }
    }
}

fn check_box(b: &BoxCxCy, what: &str) -> Result<()> {
    if !(b[2] > 0.0 && b[3] > 0.0) || b.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("{what} box {b:?} must be finite with w, h > 0")));
    }
    Ok(())
}

/// CIoU loss over dual-valued predictions.
pub(crate) fn ciou_dual(pred: [Dual; 4], gt: &BoxCxCy, br: &Branches) -> Dual {
    let half = |d: Dual| d.scale(0.5);
    let (pcx, pcy, pw, ph) = (pred[0], pred[1], pred[2], pred[3]);
    let px1 = pcx - half(pw);
    let px2 = pcx + half(pw);
    let py1 = pcy - half(ph);
    let py2 = pcy + half(ph);
    let g = to_corners(gt);
    let (gx1, gy1, gx2, gy2) = (Dual::cst(g[0]), Dual::cst(g[1]), Dual::cst(g[2]), Dual::cst(g[3]));
    let zero = Dual::cst(0.0);
    let iw = br.max(br.min(px2, gx2) - br.max(px1, gx1), zero);
    let ih = br.max(br.min(py2, gy2) - br.max(py1, gy1), zero);
    let inter = iw * ih;
    let union = pw * ph + Dual::cst(gt[2] * gt[3]) - inter;
    let iou = inter / union;
    let cw = br.max(px2, gx2) - br.min(px1, gx1);
    let ch = br.max(py2, gy2) - br.min(py1, gy1);
    let c2 = cw.sq() + ch.sq();
    let rho2 = (pcx - Dual::cst(gt[0])).sq() + (pcy - Dual::cst(gt[1])).sq();
    let dv = Dual::cst((gt[2] / gt[3]).atan()) - (pw / ph).atan();
    let v = dv.sq().scale(4.0 / (PI * PI));
    let denom = Dual::cst(1.0) - iou + v;
    let alpha = if denom.v > 0.0 { v / denom } else { zero };
    Dual::cst(1.0) - iou + rho2 / c2 + alpha * v
}

pub fn ciou_loss(pred: &BoxCxCy, gt: &BoxCxCy) -> Result<f64> {
    Ok(ciou_loss_grad(pred, gt)?.0)
}

/// Loss and its gradient with respect to `pred`.
pub fn ciou_loss_grad(pred: &BoxCxCy, gt: &BoxCxCy) -> Result<(f64, [f64; 4])> {
    check_box(gt, "ground-truth")?;
    check_box(pred, "predicted")?;
    let p = std::array::from_fn(|i| Dual::var(pred[i], i));
    let l = ciou_dual(p, gt, &Branches::default());
    // corner round-off would otherwise leave ~1e-16 for identical boxes
    let v = if pred == gt { 0.0 } else { l.v.max(0.0) };
    Ok((v, l.d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::relative_error;
    use proptest::prelude::*;

    #[test]
    fn iou_cases() {
        let a = [0.5, 0.5, 1.0, 1.0];
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &[3.0, 3.0, 1.0, 1.0]), 0.0);
        assert!((iou(&a, &[1.0, 0.5, 1.0, 1.0]) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ciou_identical_is_zero() {
        let b = [0.3, 0.4, 0.2, 0.1];
        assert_eq!(ciou_loss(&b, &b).unwrap(), 0.0);
    }

    #[test]
    fn ciou_translation_has_no_aspect_term() {
        let p = [0.5, 0.5, 0.2, 0.2];
        let g = [0.55, 0.5, 0.2, 0.2];
        let i = iou(&p, &g);
        // enclosing box 0.25 x 0.2
        let expect = 1.0 - i + 0.05f64.powi(2) / (0.25f64.powi(2) + 0.2f64.powi(2));
        assert!((ciou_loss(&p, &g).unwrap() - expect).abs() < 1e-15);
    }

    /// Straight-line re-derivation, kept separate from the dual-number path.
    fn ciou_scalar(p: &BoxCxCy, g: &BoxCxCy) -> f64 {
        let (px1, py1, px2, py2) = (p[0] - p[2] / 2.0, p[1] - p[3] / 2.0, p[0] + p[2] / 2.0, p[1] + p[3] / 2.0);
        let (gx1, gy1, gx2, gy2) = (g[0] - g[2] / 2.0, g[1] - g[3] / 2.0, g[0] + g[2] / 2.0, g[1] + g[3] / 2.0);
        let inter = (px2.min(gx2) - px1.max(gx1)).max(0.0) * (py2.min(gy2) - py1.max(gy1)).max(0.0);
        let iou = inter / (p[2] * p[3] + g[2] * g[3] - inter);
        let c2 = (px2.max(gx2) - px1.min(gx1)).powi(2) + (py2.max(gy2) - py1.min(gy1)).powi(2);
        let rho2 = (p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2);
        let v = 4.0 / PI.powi(2) * ((g[2] / g[3]).atan() - (p[2] / p[3]).atan()).powi(2);
        let alpha = if v == 0.0 { 0.0 } else { v / (1.0 - iou + v) };
        1.0 - iou + rho2 / c2 + alpha * v
    }

    #[test]
    fn ciou_worked_value() {
        let p = [0.5, 0.5, 0.2, 0.2];
        let g = [0.6, 0.5, 0.2, 0.4];
        let got = ciou_loss(&p, &g).unwrap();
        // overlap 0.1 x 0.2 = 0.02, union 0.04 + 0.08 - 0.02 = 0.1, IoU = 0.2
        // enclosing 0.3 x 0.4, c^2 = 0.25, rho^2 = 0.01
        // v = 4/pi^2 (atan 0.5 - pi/4)^2
        let v = 4.0 / (PI * PI) * (0.5f64.atan() - PI / 4.0).powi(2);
        let expect = 1.0 - 0.2 + 0.01 / 0.25 + v * v / (0.8 + v);
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        // frozen from a 30-digit evaluation
        assert!((got - 0.842_090_778_729_814_2).abs() < 1e-12);
        assert!((got - ciou_scalar(&p, &g)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_gt_rejected() {
        assert!(matches!(ciou_loss(&[0.5, 0.5, 0.1, 0.1], &[0.5, 0.5, 0.0, 0.1]), Err(Error::Domain(_))));
    }

    fn arb_box() -> impl Strategy<Value = BoxCxCy> {
        (0.0f64..1.0, 0.0f64..1.0, 0.01f64..0.8, 0.01f64..0.8).prop_map(|(a, b, c, d)| [a, b, c, d])
    }

    proptest! {
        #[test]
        fn ciou_bounded_and_matches_scalar(p in arb_box(), g in arb_box()) {
            let l = ciou_loss(&p, &g).unwrap();
            prop_assert!((0.0..3.0).contains(&l));
            prop_assert!((l - ciou_scalar(&p, &g)).abs() < 1e-12);
            if p != g { prop_assert!(l > 0.0); }
        }

        #[test]
        fn iou_symmetric_in_unit_range(a in arb_box(), b in arb_box()) {
            let x = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(x, iou(&b, &a));
        }
    }

    #[test]
    fn ciou_gradient_matches_differences() {
        let h = 1e-5;
        let mut checked = 0;
        for seed in 0..10u64 {
            let mut init = crate::numeric::Init::new(seed);
            let r = init.uniform(&[8], 0.0, 1.0);
            let r = r.data();
            let g = [0.3 + 0.4 * r[0], 0.3 + 0.4 * r[1], 0.1 + 0.3 * r[2], 0.1 + 0.3 * r[3]];
            let p = [g[0] + 0.1 * (r[4] - 0.5), g[1] + 0.1 * (r[5] - 0.5), g[2] * (0.7 + 0.6 * r[6]), g[3] * (0.7 + 0.6 * r[7])];
            let (_, grad) = ciou_loss_grad(&p, &g).unwrap();
            for i in 0..4 {
                let (mut a, mut b) = (p, p);
                a[i] += h;
                b[i] -= h;
                let num = (ciou_scalar(&a, &g) - ciou_scalar(&b, &g)) / (2.0 * h);
                assert!(relative_error(grad[i], num) <= 1e-4, "seed {seed} coord {i}: {} vs {num}", grad[i]);
                checked += 1;
            }
        }
        assert_eq!(checked, 40);
    }
}
