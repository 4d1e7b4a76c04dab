//! Seeded geometric test-time augmentation: rotation, shear and crop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{from_corners, to_corners, GroundTruthBox};
use crate::numeric::Tensor;
use crate::sampler::{bilinear_sample, PaddingPolicy};
use crate::tps::SamplingGrid;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentOp {
    Rotation,
    Shear,
    Crop,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 3] = [AugmentOp::Rotation, AugmentOp::Shear, AugmentOp::Crop];

    pub fn name(self) -> &'static str {
        match self {
            AugmentOp::Rotation => "rotation",
            AugmentOp::Shear => "shear",
            AugmentOp::Crop => "crop",
        }
    }
}

impl std::str::FromStr for AugmentOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotation" => Ok(AugmentOp::Rotation),
            "shear" => Ok(AugmentOp::Shear),
            "crop" => Ok(AugmentOp::Crop),
            _ => Err(Error::Config(format!("unknown augmentation '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    /// Rotation angle drawn uniformly from `±rotation_deg`.
    pub rotation_deg: f64,
    /// Horizontal and vertical shear angles, each drawn from `±shear_deg`.
    pub shear_deg: f64,
    /// The crop keeps a `1 - crop_fraction` window per axis at a random offset and
    /// zooms it back to full frame.
    pub crop_fraction: f64,
    pub enabled: Vec<AugmentOp>,
    /// Test hook: replaces the drawn rotation angle.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_rotation_deg: Option<f64>,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            rotation_deg: 10.0,
            shear_deg: 10.0,
            crop_fraction: 0.15,
            enabled: Vec::new(),
            fixed_rotation_deg: None,
        }
    }
}

impl AugmentationSpec {
    pub fn with_ops(ops: &[AugmentOp]) -> Self {
        Self {
            enabled: ops.to_vec(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("rotation_deg", self.rotation_deg), ("shear_deg", self.shear_deg)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.shear_deg >= 45.0 {
            return Err(Error::Config(format!("shear_deg must be below 45, got {}", self.shear_deg)));
        }
        if !(0.0..0.9).contains(&self.crop_fraction) {
            return Err(Error::Config(format!("crop_fraction must be in [0, 0.9), got {}", self.crop_fraction)));
        }
        Ok(())
    }

    pub fn is_enabled(&self, op: AugmentOp) -> bool {
        self.enabled.contains(&op)
    }

    /// `"none"`, or the enabled ops joined by `+` in application order.
    pub fn label(&self) -> String {
        let ops: Vec<&str> = AugmentOp::ALL.iter().filter(|o| self.is_enabled(**o)).map(|o| o.name()).collect();
        if ops.is_empty() {
            "none".into()
        } else {
            ops.join("+")
        }
    }
}

/// Boxes losing more than this fraction of their transformed area to clipping are dropped.
pub const MAX_AREA_LOSS: f64 = 0.8;

/// 2×3 affine map in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Affine([[f64; 3]; 2]);

impl Affine {
    const IDENTITY: Affine = Affine([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);

    /// Linear part `m` applied about point `c`.
    fn about(m: [[f64; 2]; 2], c: [f64; 2]) -> Self {
        let tx = c[0] - m[0][0] * c[0] - m[0][1] * c[1];
        let ty = c[1] - m[1][0] * c[0] - m[1][1] * c[1];
        Affine([[m[0][0], m[0][1], tx], [m[1][0], m[1][1], ty]])
    }

    /// `self ∘ first`.
    fn after(&self, first: &Affine) -> Affine {
        let (a, b) = (self.0, first.0);
        let mut out = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                out[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c] + if c == 2 { a[r][2] } else { 0.0 };
            }
        }
        Affine(out)
    }

    fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let m = self.0;
        [m[0][0] * p[0] + m[0][1] * p[1] + m[0][2], m[1][0] * p[0] + m[1][1] * p[1] + m[1][2]]
    }

    fn inverse(&self) -> Affine {
        let m = self.0;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
        let t = [
            -(inv[0][0] * m[0][2] + inv[0][1] * m[1][2]),
            -(inv[1][0] * m[0][2] + inv[1][1] * m[1][2]),
        ];
        Affine([[inv[0][0], inv[0][1], t[0]], [inv[1][0], inv[1][1], t[1]]])
    }
}

/// Draws the composite forward map (input pixel -> output pixel) for a `w×h` frame.
fn draw_transform(spec: &AugmentationSpec, w: f64, h: f64, seed: u64) -> Affine {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = [0.5 * w, 0.5 * h];
    let mut t = Affine::IDENTITY;
    if spec.is_enabled(AugmentOp::Rotation) {
        let drawn = if spec.rotation_deg > 0.0 { rng.gen_range(-spec.rotation_deg..=spec.rotation_deg) } else { 0.0 };
        let deg = spec.fixed_rotation_deg.unwrap_or(drawn);
        if deg != 0.0 {
            let (s, co) = deg.to_radians().sin_cos();
            // Image y points down, so this turns content counterclockwise on screen.
            t = Affine::about([[co, s], [-s, co]], c).after(&t);
        }
    }
    if spec.is_enabled(AugmentOp::Shear) {
        let mut draw = || if spec.shear_deg > 0.0 { rng.gen_range(-spec.shear_deg..=spec.shear_deg) } else { 0.0 };
        let (sx, sy) = (draw(), draw());
        t = Affine::about([[1.0, sx.to_radians().tan()], [0.0, 1.0]], c).after(&t);
        t = Affine::about([[1.0, 0.0], [sy.to_radians().tan(), 1.0]], c).after(&t);
    }
    if spec.is_enabled(AugmentOp::Crop) && spec.crop_fraction > 0.0 {
        let f = spec.crop_fraction;
        let (ox, oy) = (rng.gen_range(0.0..=f * w), rng.gen_range(0.0..=f * h));
        let z = 1.0 / (1.0 - f);
        t = Affine([[z, 0.0, -ox * z], [0.0, z, -oy * z]]).after(&t);
    }
    t
}

fn transform_box(t: &Affine, b: &GroundTruthBox, w: f64, h: f64) -> Option<GroundTruthBox> {
    let [x0, y0, x1, y1] = to_corners(&b.bbox);
    let pts = [[x0, y0], [x1, y0], [x0, y1], [x1, y1]].map(|p| {
        let q = t.apply([p[0] * w, p[1] * h]);
        [q[0] / w, q[1] / h]
    });
    let lo = |k: usize| pts.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
    let hi = |k: usize| pts.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
    let hull = [lo(0), lo(1), hi(0), hi(1)];
    let area = (hull[2] - hull[0]) * (hull[3] - hull[1]);
    let clipped = [hull[0].max(0.0), hull[1].max(0.0), hull[2].min(1.0), hull[3].min(1.0)];
    let kept = (clipped[2] - clipped[0]).max(0.0) * (clipped[3] - clipped[1]).max(0.0);
    if !(area > 0.0) || kept < (1.0 - MAX_AREA_LOSS) * area {
        return None;
    }
    GroundTruthBox::new(from_corners(&clipped), b.class_id).ok()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub image: Tensor,
    pub labels: Vec<GroundTruthBox>,
}

/// Applies the enabled ops in the order rotation, shear, crop. Returns `None` when
/// every label of a labelled scene is dropped; such scenes are skipped by callers.
pub fn augment(image: &Tensor, labels: &[GroundTruthBox], spec: &AugmentationSpec, seed: u64) -> Result<Option<Augmented>> {
    spec.validate()?;
    let (c, h, w) = match image.shape() {
        &[c, h, w] if h >= 2 && w >= 2 => (c, h, w),
        s => return Err(Error::Config(format!("augment expects a [C,H,W] image of at least 2x2, got {s:?}"))),
    };
    if spec.enabled.is_empty() {
        return Ok(Some(Augmented {
            image: image.clone(),
            labels: labels.to_vec(),
        }));
    }
    let (wf, hf) = (w as f64, h as f64);
    let fwd = draw_transform(spec, wf, hf, seed);
    let inv = fwd.inverse();
    let mut coords = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            // pixel centers sit at half-integers
            let p = inv.apply([j as f64 + 0.5, i as f64 + 0.5]);
            coords.push(-1.0 + 2.0 * (p[0] - 0.5) / (wf - 1.0));
            coords.push(-1.0 + 2.0 * (p[1] - 0.5) / (hf - 1.0));
        }
    }
    let grid = SamplingGrid::new(h, w, coords)?;
    let out = bilinear_sample(image, &grid, PaddingPolicy::Zeros)?;
    debug_assert_eq!(out.shape(), &[c, h, w]);
    let kept: Vec<GroundTruthBox> = labels.iter().filter_map(|b| transform_box(&fwd, b, wf, hf)).collect();
    if !labels.is_empty() && kept.is_empty() {
        return Ok(None);
    }
    Ok(Some(Augmented { image: out, labels: kept }))
}
