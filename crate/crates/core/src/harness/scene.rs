//! Synthetic plant scenes: soft-edged curved strokes over low-frequency clutter.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::detect::GroundTruthBox;
use crate::numeric::Tensor;
use crate::tps::{fit_tps, tps_transform, ControlPointSet, Point};
use crate::{Error, Result};

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    BlobLeaf,
    ElongatedStem,
    Rosette,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; NUM_CLASSES] = [ShapeClass::BlobLeaf, ShapeClass::ElongatedStem, ShapeClass::Rosette];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::BlobLeaf => "blob-leaf",
            ShapeClass::ElongatedStem => "elongated-stem",
            ShapeClass::Rosette => "rosette",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub image_size: usize,
    pub num_objects: usize,
    pub occlusion_prob: f64,
    pub bend_amplitude: f64,
    pub clutter_level: f64,
    pub seed: u64,
    /// Forces every object to this class when set.
    pub class: Option<ShapeClass>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_objects: 2,
            occlusion_prob: 0.5,
            bend_amplitude: 0.6,
            clutter_level: 0.5,
            seed: 0,
            class: None,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config(format!("image_size must be >= 16, got {}", self.image_size)));
        }
        if !(1..=4).contains(&self.num_objects) {
            return Err(Error::Config(format!("num_objects must be in 1..=4, got {}", self.num_objects)));
        }
        for (name, v) in [
            ("occlusion_prob", self.occlusion_prob),
            ("bend_amplitude", self.bend_amplitude),
            ("clutter_level", self.clutter_level),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Quadratic Bézier spine with a width profile, in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stroke {
    pub p0: Point,
    pub p1: Point,
    pub p2: Point,
    pub width: f64,
    /// `true`: width tapers as `sin(πt)^0.7`; `false`: constant width.
    pub tapered: bool,
}

impl Stroke {
    pub fn point(&self, t: f64) -> Point {
        let u = 1.0 - t;
        [
            u * u * self.p0[0] + 2.0 * u * t * self.p1[0] + t * t * self.p2[0],
            u * u * self.p0[1] + 2.0 * u * t * self.p1[1] + t * t * self.p2[1],
        ]
    }

    pub fn width_at(&self, t: f64) -> f64 {
        if self.tapered {
            self.width * (std::f64::consts::PI * t).sin().max(0.0).powf(0.7)
        } else {
            self.width
        }
    }
}

/// Edge softness in pixels.
pub const EDGE_SOFTNESS: f64 = 0.5;
/// Support threshold, as a fraction of the shape's peak coverage.
pub const SUPPORT_THRESHOLD: f64 = 0.1;
const SEGMENTS: usize = 32;

/// Sampled centerline: `(x, y, half-width)` in pixel units.
struct Polyline(Vec<[f64; 3]>);

fn polyline(stroke: &Stroke, size: usize, warp: Option<&crate::tps::TpsParams>) -> Polyline {
    let s = size as f64;
    Polyline(
        (0..=SEGMENTS)
            .map(|k| {
                let t = k as f64 / SEGMENTS as f64;
                let mut p = stroke.point(t);
                if let Some(w) = warp {
                    p = tps_transform(w, p);
                }
                [p[0] * s, p[1] * s, stroke.width_at(t) * s]
            })
            .collect(),
    )
}

/// Coverage of one pixel center by a polyline with linearly interpolated width.
fn coverage(line: &Polyline, x: f64, y: f64) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for seg in line.0.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 { (((x - a[0]) * dx + (y - a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let (px, py) = (a[0] + t * dx, a[1] + t * dy);
        let d = ((x - px).powi(2) + (y - py).powi(2)).sqrt();
        let w = a[2] + t * (b[2] - a[2]);
        best = best.max(w - d);
    }
    1.0 / (1.0 + (-best / EDGE_SOFTNESS).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub class: ShapeClass,
    pub strokes: Vec<Stroke>,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Tensor,
    pub labels: Vec<GroundTruthBox>,
}

fn shape_strokes(class: ShapeClass, center: Point, radius: f64, rng: &mut ChaCha8Rng, size: usize) -> Vec<Stroke> {
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let min_w = 0.9 / size as f64;
    let along = |ang: f64, len: f64, bend: f64| -> Stroke {
        let (c, s) = (ang.cos(), ang.sin());
        let (start, end) = match class {
            ShapeClass::Rosette => (center, [center[0] + c * len, center[1] + s * len]),
            _ => (
                [center[0] - 0.5 * c * len, center[1] - 0.5 * s * len],
                [center[0] + 0.5 * c * len, center[1] + 0.5 * s * len],
            ),
        };
        let mid = [0.5 * (start[0] + end[0]) - s * bend, 0.5 * (start[1] + end[1]) + c * bend];
        Stroke {
            p0: start,
            p1: mid,
            p2: end,
            width: 0.0,
            tapered: true,
        }
    };
    match class {
        ShapeClass::BlobLeaf => {
            let bend = rng.gen_range(-0.3..0.3) * radius;
            let mut st = along(theta, 2.0 * radius, bend);
            st.width = (0.45 * radius).max(min_w);
            vec![st]
        }
        ShapeClass::ElongatedStem => {
            let bend = rng.gen_range(-0.5..0.5) * radius;
            let mut st = along(theta, 2.6 * radius, bend);
            st.width = (0.1 * radius).max(min_w);
            st.tapered = false;
            vec![st]
        }
        ShapeClass::Rosette => {
            let petals = 5;
            (0..petals)
                .map(|k| {
                    let ang = theta + std::f64::consts::TAU * k as f64 / petals as f64;
                    let bend = rng.gen_range(-0.15..0.15) * radius;
                    let mut st = along(ang, radius, bend);
                    st.width = (0.28 * radius).max(min_w);
                    st
                })
                .collect()
        }
    }
}

fn base_color(class: ShapeClass, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let base = match class {
        ShapeClass::BlobLeaf => [0.20, 0.60, 0.18],
        ShapeClass::ElongatedStem => [0.42, 0.52, 0.20],
        ShapeClass::Rosette => [0.18, 0.50, 0.32],
    };
    base.map(|c: f64| (c + rng.gen_range(-0.06..0.06)).clamp(0.0, 1.0))
}

/// Random TPS bend of an object's neighbourhood: a 3×3 lattice spanning the object,
/// displaced by up to `amplitude · 0.35 · radius`.
fn bend_warp(center: Point, radius: f64, amplitude: f64, rng: &mut ChaCha8Rng) -> Option<crate::tps::TpsParams> {
    if amplitude <= 0.0 {
        return None;
    }
    let span = 1.4 * radius;
    let mut src = Vec::with_capacity(9);
    let mut dst = Vec::with_capacity(9);
    for i in 0..3 {
        for j in 0..3 {
            let p = [center[0] + span * (j as f64 - 1.0), center[1] + span * (i as f64 - 1.0)];
            let amp = amplitude * 0.35 * radius;
            src.push(p);
            dst.push([p[0] + rng.gen_range(-amp..amp), p[1] + rng.gen_range(-amp..amp)]);
        }
    }
    let cps = ControlPointSet::new(src, dst).expect("lattice control points");
    Some(fit_tps(&cps, 0.0).expect("lattice fit"))
}

/// Places objects, returning `(class, center, radius)` triples.
fn layout(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<(ShapeClass, Point, f64)> {
    let mut placed: Vec<(ShapeClass, Point, f64)> = Vec::new();
    for k in 0..spec.num_objects {
        let class = spec.class.unwrap_or_else(|| ShapeClass::ALL[rng.gen_range(0..NUM_CLASSES)]);
        let radius: f64 = rng.gen_range(0.08..0.15);
        let margin = 1.3 * radius + 0.02;
        let free = |rng: &mut ChaCha8Rng| [rng.gen_range(margin..1.0 - margin), rng.gen_range(margin..1.0 - margin)];
        let occlude = k > 0 && rng.gen_bool(spec.occlusion_prob);
        let center = if occlude {
            let (_, anchor, r0) = placed[rng.gen_range(0..placed.len())];
            let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let dist = rng.gen_range(0.2..0.5) * radius.min(r0);
            [
                (anchor[0] + dist * ang.cos()).clamp(margin, 1.0 - margin),
                (anchor[1] + dist * ang.sin()).clamp(margin, 1.0 - margin),
            ]
        } else {
            let mut c = free(rng);
            for _ in 0..20 {
                let clear = placed
                    .iter()
                    .all(|(_, p, r)| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt() > 1.3 * (r + radius));
                if clear {
                    break;
                }
                c = free(rng);
            }
            c
        };
        placed.push((class, center, radius));
    }
    placed
}

fn background(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = spec.image_size;
    let s = n as f64;
    let soil = [0.45, 0.35, 0.25].map(|c: f64| c + rng.gen_range(-0.05..0.05));
    let level = spec.clutter_level;
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(1.0..3.0) * std::f64::consts::TAU * rng.gen_range(-1.0..1.0),
                rng.gen_range(1.0..3.0) * std::f64::consts::TAU * rng.gen_range(-1.0..1.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.5..1.0),
            )
        })
        .collect();
    // unlabeled pebbles
    let pebbles: Vec<(Point, f64, [f64; 3])> = (0..(level * 5.0).round() as usize)
        .map(|_| {
            let c = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
            let r = rng.gen_range(0.02..0.06);
            let tone = rng.gen_range(0.5..0.8);
            (c, r, [tone, tone * 0.85, tone * 0.7])
        })
        .collect();
    let mut img = vec![0.0; 3 * n * n];
    for i in 0..n {
        for j in 0..n {
            let (x, y) = ((j as f64 + 0.5) / s, (i as f64 + 0.5) / s);
            let wave: f64 = waves.iter().map(|(fx, fy, ph, a)| a * (fx * x + fy * y + ph).cos()).sum::<f64>() / 4.0;
            let mut px = soil.map(|c| c + 0.15 * level * wave);
            for (c, r, col) in &pebbles {
                let d = ((x - c[0]).powi(2) + (y - c[1]).powi(2)).sqrt();
                let a = 1.0 / (1.0 + ((d - r) * s / EDGE_SOFTNESS).exp());
                for ch in 0..3 {
                    px[ch] = px[ch] * (1.0 - a) + col[ch] * a;
                }
            }
            for ch in 0..3 {
                img[(ch * n + i) * n + j] = px[ch];
            }
        }
    }
    img
}

/// Renders a scene. Identical specs give bit-identical scenes.
pub fn gen_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.image_size;
    let s = n as f64;
    let mut img = background(spec, &mut rng);
    let mut labels = Vec::with_capacity(spec.num_objects);
    for (class, center, radius) in layout(spec, &mut rng) {
        let strokes = shape_strokes(class, center, radius, &mut rng, n);
        let color = base_color(class, &mut rng);
        let warp = bend_warp(center, radius, spec.bend_amplitude, &mut rng);
        let lines: Vec<Polyline> = strokes.iter().map(|st| polyline(st, n, warp.as_ref())).collect();
        let mask: Vec<f64> = (0..n * n)
            .map(|p| {
                let (x, y) = ((p % n) as f64 + 0.5, (p / n) as f64 + 0.5);
                lines.iter().map(|l| coverage(l, x, y)).fold(0.0, f64::max)
            })
            .collect();
        let peak = mask.iter().copied().fold(0.0, f64::max);
        let (mut x0, mut y0, mut x1, mut y1) = (n, n, 0, 0);
        for (p, &m) in mask.iter().enumerate() {
            if m > SUPPORT_THRESHOLD * peak {
                let (i, j) = (p / n, p % n);
                x0 = x0.min(j);
                y0 = y0.min(i);
                x1 = x1.max(j + 1);
                y1 = y1.max(i + 1);
            }
        }
        if x1 <= x0 || y1 <= y0 {
            continue;
        }
        for (p, &m) in mask.iter().enumerate() {
            for ch in 0..3 {
                let v = &mut img[ch * n * n + p];
                *v = *v * (1.0 - m) + color[ch] * m;
            }
        }
        let bbox = [
            0.5 * (x0 + x1) as f64 / s,
            0.5 * (y0 + y1) as f64 / s,
            (x1 - x0) as f64 / s,
            (y1 - y0) as f64 / s,
        ];
        labels.push(GroundTruthBox::new(bbox, class.id())?);
    }
    if spec.clutter_level > 0.0 {
        let sigma = 0.02 * spec.clutter_level;
        for v in img.iter_mut() {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            *v += sigma * z;
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(Scene {
        image: Tensor::new(&[3, n, n], img)?,
        labels,
    })
}

/// Objects of a scene before rendering; exposed for extent checks.
pub fn scene_objects(spec: &SceneSpec) -> Result<Vec<SceneObject>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let _ = background(spec, &mut rng);
    let mut out = Vec::new();
    for (class, center, radius) in layout(spec, &mut rng) {
        let strokes = shape_strokes(class, center, radius, &mut rng, spec.image_size);
        let color = base_color(class, &mut rng);
        let _ = bend_warp(center, radius, spec.bend_amplitude, &mut rng);
        out.push(SceneObject { class, strokes, color });
    }
    Ok(out)
}
