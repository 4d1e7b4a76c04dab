//! Thin-plate-spline warps: fitting, point evaluation, bending energy and dense
//! sampling grids.
//!
//! A warp maps `(x, y)` to `a0 + a1·x + a2·y + Σ wᵢ·U(‖(x, y) − sᵢ‖)` per output
//! coordinate with `U(r) = r²·ln r`. Fitting solves the bordered system
//!
//! ```text
//! | K + λI  P | |w|   |v|
//! | Pᵀ      0 | |a| = |0|
//! ```
//!
//! where `Kᵢⱼ = U(‖sᵢ − sⱼ‖)` and the rows of `P` are `(1, xᵢ, yᵢ)`. The zero block
//! enforces `Σw = Σw·x = Σw·y = 0`, so every fitted warp is affine at infinity.
//!
//! All coordinates live in the normalized frame `[-1, 1]²` with the align-corners
//! convention: pixel `0` sits at `-1`, pixel `n - 1` at `+1`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::numeric::linalg::Lu;
use crate::numeric::{Graph, NumericError, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum TpsError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate control points: {0}")]
    Degenerate(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("malformed parameter document: {0}")]
    Parse(String),
}

pub type Point = [f64; 2];

/// Paired source/target control points.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPointSet {
    source: Vec<Point>,
    target: Vec<Point>,
}

impl ControlPointSet {
    pub fn new(source: Vec<Point>, target: Vec<Point>) -> Result<Self, TpsError> {
        if source.len() != target.len() {
            return Err(TpsError::Config(format!(
                "{} source points but {} targets",
                source.len(),
                target.len()
            )));
        }
        if source.len() < 3 {
            return Err(TpsError::Degenerate(format!(
                "need at least 3 control points, got {}",
                source.len()
            )));
        }
        if source.iter().chain(&target).flatten().any(|v| !v.is_finite()) {
            return Err(TpsError::Domain("control points must be finite".into()));
        }
        if is_collinear(&source) {
            return Err(TpsError::Degenerate(format!(
                "the {} source points are collinear",
                source.len()
            )));
        }
        Ok(Self { source, target })
    }

    pub fn source(&self) -> &[Point] {
        &self.source
    }

    pub fn target(&self) -> &[Point] {
        &self.target
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

fn is_collinear(points: &[Point]) -> bool {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let det = sxx * syy - sxy * sxy;
    let tr = sxx + syy;
    tr == 0.0 || det <= 1e-12 * tr * tr
}

/// Fitted warp. `affine[k] = (a0, a1, a2)` and `weights[i][k]` for output coordinate `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TpsParams {
    pub affine: [[f64; 3]; 2],
    pub weights: Vec<[f64; 2]>,
    pub source: Vec<Point>,
    pub lambda: f64,
}

impl TpsParams {
    pub fn new(
        affine: [[f64; 3]; 2],
        weights: Vec<[f64; 2]>,
        source: Vec<Point>,
        lambda: f64,
    ) -> Result<Self, TpsError> {
        if weights.len() != source.len() {
            return Err(TpsError::Config(format!(
                "{} weights for {} anchors",
                weights.len(),
                source.len()
            )));
        }
        check_lambda(lambda)?;
        Ok(Self {
            affine,
            weights,
            source,
            lambda,
        })
    }

    /// The identity warp anchored at `source`.
    pub fn identity(source: Vec<Point>) -> Self {
        let n = source.len();
        Self {
            affine: [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            weights: vec![[0.0; 2]; n],
            source,
            lambda: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Largest violation of `Σw = Σw·x = Σw·y = 0` over both output coordinates.
    pub fn side_condition_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..2 {
            let mut s = [0.0; 3];
            for (w, p) in self.weights.iter().zip(&self.source) {
                s[0] += w[k];
                s[1] += w[k] * p[0];
                s[2] += w[k] * p[1];
            }
            worst = s.iter().fold(worst, |m, v| m.max(v.abs()));
        }
        worst
    }

    /// Stacked `[(N + 3), 2]` coefficient matrix: weights first, then `a0, a1, a2`.
    pub fn coefficients(&self) -> Tensor {
        let n = self.len();
        let mut data = Vec::with_capacity(2 * (n + 3));
        for w in &self.weights {
            data.extend_from_slice(w);
        }
        for j in 0..3 {
            data.push(self.affine[0][j]);
            data.push(self.affine[1][j]);
        }
        Tensor::new(&[n + 3, 2], data).expect("coefficient layout")
    }

    pub fn from_coefficients(source: Vec<Point>, coef: &Tensor, lambda: f64) -> Result<Self, TpsError> {
        let n = source.len();
        if coef.shape() != [n + 3, 2] {
            return Err(TpsError::Config(format!(
                "coefficient matrix {:?} does not fit {n} anchors",
                coef.shape()
            )));
        }
        let c = coef.data();
        let weights = (0..n).map(|i| [c[2 * i], c[2 * i + 1]]).collect();
        let a = |j: usize, k: usize| c[2 * (n + j) + k];
        let affine = [[a(0, 0), a(1, 0), a(2, 0)], [a(0, 1), a(1, 1), a(2, 1)]];
        Self::new(affine, weights, source, lambda)
    }

    /// Plain-text document with 17 significant digits per value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lambda {:.16e}", self.lambda);
        let _ = writeln!(s, "n {}", self.len());
        for p in &self.source {
            let _ = writeln!(s, "source {:.16e} {:.16e}", p[0], p[1]);
        }
        for row in &self.affine {
            let _ = writeln!(s, "affine {:.16e} {:.16e} {:.16e}", row[0], row[1], row[2]);
        }
        for w in &self.weights {
            let _ = writeln!(s, "weight {:.16e} {:.16e}", w[0], w[1]);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, TpsError> {
        let mut lambda = None;
        let mut n = None;
        let (mut source, mut affine, mut weights) = (Vec::new(), Vec::new(), Vec::new());
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default();
            let vals: Vec<f64> = parts
                .map(|v| v.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| TpsError::Parse(format!("line {}: {e}", lineno + 1)))?;
            let want = |k: usize| -> Result<(), TpsError> {
                if vals.len() != k {
                    return Err(TpsError::Parse(format!(
                        "line {}: `{key}` takes {k} values, got {}",
                        lineno + 1,
                        vals.len()
                    )));
                }
                Ok(())
            };
            match key {
                "lambda" => {
                    want(1)?;
                    lambda = Some(vals[0]);
                }
                "n" => {
                    want(1)?;
                    n = Some(vals[0] as usize);
                }
                "source" => {
                    want(2)?;
                    source.push([vals[0], vals[1]]);
                }
                "affine" => {
                    want(3)?;
                    affine.push([vals[0], vals[1], vals[2]]);
                }
                "weight" => {
                    want(2)?;
                    weights.push([vals[0], vals[1]]);
                }
                other => {
                    return Err(TpsError::Parse(format!("line {}: unknown key `{other}`", lineno + 1)))
                }
            }
        }
        let lambda = lambda.ok_or_else(|| TpsError::Parse("missing `lambda`".into()))?;
        let n = n.ok_or_else(|| TpsError::Parse("missing `n`".into()))?;
        if source.len() != n || weights.len() != n || affine.len() != 2 {
            return Err(TpsError::Parse(format!(
                "expected {n} sources, {n} weights and 2 affine rows; got {}, {}, {}",
                source.len(),
                weights.len(),
                affine.len()
            )));
        }
        Self::new([affine[0], affine[1]], weights, source, lambda)
    }
}

fn check_lambda(lambda: f64) -> Result<(), TpsError> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(TpsError::Domain(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    Ok(())
}

/// `U(r) = r²·ln r`, with `U(0) = 0`.
pub fn tps_kernel(r: f64) -> Result<f64, TpsError> {
    if !(r >= 0.0) {
        return Err(TpsError::Domain(format!("kernel distance must be >= 0, got {r}")));
    }
    Ok(kernel_sq(r * r))
}

/// `U` evaluated from a squared distance: `½·r²·ln r²`.
#[inline]
pub(crate) fn kernel_sq(r2: f64) -> f64 {
    if r2 == 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

#[inline]
fn dist2(a: Point, b: Point) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    dx * dx + dy * dy
}

fn kernel_matrix(source: &[Point]) -> Vec<f64> {
    let n = source.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] = kernel_sq(dist2(source[i], source[j]));
        }
    }
    k
}

/// Bordered TPS system matrix for the given anchors and regularization.
fn system_matrix(source: &[Point], lambda: f64) -> Vec<f64> {
    let n = source.len();
    let m = n + 3;
    let k = kernel_matrix(source);
    let mut l = vec![0.0; m * m];
    for i in 0..n {
        for j in 0..n {
            l[i * m + j] = k[i * n + j];
        }
        l[i * m + i] += lambda;
        let p = [1.0, source[i][0], source[i][1]];
        for (c, &v) in p.iter().enumerate() {
            l[i * m + n + c] = v;
            l[(n + c) * m + i] = v;
        }
    }
    l
}

/// Linear map from target coordinates to warp coefficients for a fixed set of anchors.
///
/// Because the anchors fix the system matrix, fitting reduces to
/// `coef = M · targets` with `M: [(N + 3), N]`, which also makes fitting
/// differentiable with respect to the targets.
#[derive(Debug, Clone)]
pub struct TpsSolver {
    source: Vec<Point>,
    lambda: f64,
    map: Arc<Tensor>,
}

impl TpsSolver {
    pub fn new(source: Vec<Point>, lambda: f64) -> Result<Self, TpsError> {
        check_lambda(lambda)?;
        let n = source.len();
        if n < 3 || is_collinear(&source) {
            return Err(TpsError::Degenerate(format!(
                "{n} anchors do not span the plane"
            )));
        }
        let m = n + 3;
        let lu = Lu::factor(m, &system_matrix(&source, lambda)).map_err(|e| {
            TpsError::Degenerate(format!("{n}-point system at lambda {lambda} is singular ({e})"))
        })?;
        let inv = lu.inverse();
        let mut map = Vec::with_capacity(m * n);
        for r in 0..m {
            map.extend_from_slice(&inv[r * m..r * m + n]);
        }
        Ok(Self {
            source,
            lambda,
            map: Arc::new(Tensor::new(&[m, n], map).expect("solver map layout")),
        })
    }

    /// Least-squares affine fit expressed in the same coefficient layout (all weights zero).
    pub fn affine(source: Vec<Point>) -> Result<Self, TpsError> {
        let n = source.len();
        if n < 3 || is_collinear(&source) {
            return Err(TpsError::Degenerate(format!(
                "{n} anchors do not span the plane"
            )));
        }
        let pinv = affine_pseudo_inverse(&source)?;
        let mut map = vec![0.0; (n + 3) * n];
        map[n * n..].copy_from_slice(&pinv);
        Ok(Self {
            source,
            lambda: f64::INFINITY,
            map: Arc::new(Tensor::new(&[n + 3, n], map).expect("solver map layout")),
        })
    }

    pub fn source(&self) -> &[Point] {
        &self.source
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn map(&self) -> &Arc<Tensor> {
        &self.map
    }

    /// Coefficients for the given `[N, 2]` targets.
    pub fn solve(&self, targets: &[Point]) -> Tensor {
        let n = self.source.len();
        assert_eq!(targets.len(), n, "target count must match anchors");
        let m = n + 3;
        let mut coef = vec![0.0; 2 * m];
        for r in 0..m {
            let row = &self.map.data()[r * n..(r + 1) * n];
            for (i, t) in targets.iter().enumerate() {
                coef[2 * r] += row[i] * t[0];
                coef[2 * r + 1] += row[i] * t[1];
            }
        }
        Tensor::new(&[m, 2], coef).expect("coefficient layout")
    }

    /// Differentiable fit: `[N, 2]` targets to `[(N + 3), 2]` coefficients.
    pub fn solve_var(&self, g: &mut Graph, targets: Var) -> Result<Var, NumericError> {
        g.matmul_const(Arc::clone(&self.map), targets)
    }
}

/// `(PᵀP)⁻¹Pᵀ` as a `[3, N]` row-major matrix.
fn affine_pseudo_inverse(source: &[Point]) -> Result<Vec<f64>, TpsError> {
    let n = source.len();
    let mut ptp = [0.0; 9];
    for p in source {
        let row = [1.0, p[0], p[1]];
        for a in 0..3 {
            for b in 0..3 {
                ptp[a * 3 + b] += row[a] * row[b];
            }
        }
    }
    let inv = Lu::factor(3, &ptp)
        .map_err(|e| TpsError::Degenerate(format!("affine normal equations are singular ({e})")))?
        .inverse();
    let mut out = vec![0.0; 3 * n];
    for (i, p) in source.iter().enumerate() {
        let row = [1.0, p[0], p[1]];
        for a in 0..3 {
            out[a * n + i] = (0..3).map(|b| inv[a * 3 + b] * row[b]).sum();
        }
    }
    Ok(out)
}

pub fn fit_tps(points: &ControlPointSet, lambda: f64) -> Result<TpsParams, TpsError> {
    check_lambda(lambda)?;
    let solver = TpsSolver::new(points.source.clone(), lambda)?;
    TpsParams::from_coefficients(points.source.clone(), &solve_displacements(&solver, points), lambda)
}

/// Solves for `target − source` and adds the identity back, so matching point sets give
/// exactly zero weights.
fn solve_displacements(solver: &TpsSolver, points: &ControlPointSet) -> Tensor {
    let n = points.len();
    let disp: Vec<Point> = points.source.iter().zip(&points.target).map(|(s, t)| [t[0] - s[0], t[1] - s[1]]).collect();
    let mut coef = solver.solve(&disp);
    let c = coef.data_mut();
    c[2 * (n + 1)] += 1.0;
    c[2 * (n + 2) + 1] += 1.0;
    coef
}

/// Direct least-squares affine fit of the correspondences (zero warp weights).
pub fn fit_affine(points: &ControlPointSet) -> Result<TpsParams, TpsError> {
    let solver = TpsSolver::affine(points.source.clone())?;
    TpsParams::from_coefficients(points.source.clone(), &solve_displacements(&solver, points), 0.0)
}

pub fn tps_transform(params: &TpsParams, point: Point) -> Point {
    let [x, y] = point;
    let mut out = [
        params.affine[0][0] + params.affine[0][1] * x + params.affine[0][2] * y,
        params.affine[1][0] + params.affine[1][1] * x + params.affine[1][2] * y,
    ];
    for (w, s) in params.weights.iter().zip(&params.source) {
        let u = kernel_sq(dist2(point, *s));
        out[0] += w[0] * u;
        out[1] += w[1] * u;
    }
    out
}

/// Bending energy of the fitted warp over the whole plane, summed over both output
/// coordinates: `8π·Σₖ wₖᵀ K wₖ`.
pub fn bending_energy(params: &TpsParams) -> f64 {
    let k = kernel_matrix(&params.source);
    let n = params.len();
    let mut e = 0.0;
    for c in 0..2 {
        for i in 0..n {
            let row: f64 = (0..n).map(|j| k[i * n + j] * params.weights[j][c]).sum();
            e += params.weights[i][c] * row;
        }
    }
    8.0 * PI * e
}

/// Backward-warp sampling grid: for every output pixel, the input coordinate to sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    pub height: usize,
    pub width: usize,
    /// `[H, W, 2]` row-major, `(x, y)` per pixel.
    pub coords: Vec<f64>,
}

impl SamplingGrid {
    pub fn new(height: usize, width: usize, coords: Vec<f64>) -> Result<Self, TpsError> {
        if coords.len() != height * width * 2 {
            return Err(TpsError::Config(format!(
                "{} grid values for a {height}x{width} grid",
                coords.len()
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(TpsError::Domain("grid coordinates must be finite".into()));
        }
        Ok(Self {
            height,
            width,
            coords,
        })
    }

    pub fn at(&self, i: usize, j: usize) -> Point {
        let o = 2 * (i * self.width + j);
        [self.coords[o], self.coords[o + 1]]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width, 2], self.coords.clone()).expect("grid layout")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, TpsError> {
        match t.shape() {
            &[h, w, 2] => Self::new(h, w, t.data().to_vec()),
            s => Err(TpsError::Config(format!("grid tensor must be [H,W,2], got {s:?}"))),
        }
    }
}

/// Align-corners coordinate of pixel `i` along an axis of `n` pixels.
#[inline]
pub fn pixel_to_unit(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

fn check_grid_dims(height: usize, width: usize) -> Result<(), TpsError> {
    if height < 2 || width < 2 {
        return Err(TpsError::Config(format!(
            "sampling grids need at least 2x2 pixels, got {height}x{width}"
        )));
    }
    Ok(())
}

pub fn make_grid(params: &TpsParams, height: usize, width: usize) -> Result<SamplingGrid, TpsError> {
    check_grid_dims(height, width)?;
    let mut coords = Vec::with_capacity(height * width * 2);
    for i in 0..height {
        let y = pixel_to_unit(i, height);
        for j in 0..width {
            let p = tps_transform(params, [pixel_to_unit(j, width), y]);
            coords.extend_from_slice(&p);
        }
    }
    SamplingGrid::new(height, width, coords)
}

/// `[H·W, N + 3]` design matrix: row `p` is `(U(‖p − s₁‖), …, U(‖p − s_N‖), 1, x, y)`,
/// so that `grid = basis · coefficients`.
pub fn grid_basis(source: &[Point], height: usize, width: usize) -> Result<Tensor, TpsError> {
    check_grid_dims(height, width)?;
    let n = source.len();
    let m = n + 3;
    let mut data = Vec::with_capacity(height * width * m);
    for i in 0..height {
        let y = pixel_to_unit(i, height);
        for j in 0..width {
            let x = pixel_to_unit(j, width);
            data.extend(source.iter().map(|s| kernel_sq(dist2([x, y], *s))));
            data.extend_from_slice(&[1.0, x, y]);
        }
    }
    Ok(Tensor::new(&[height * width, m], data).expect("basis layout"))
}

/// Differentiable grid generation from a `[(N + 3), 2]` coefficient variable.
/// Returns a `[H, W, 2]` variable.
pub fn make_grid_var(
    g: &mut Graph,
    basis: &Arc<Tensor>,
    height: usize,
    width: usize,
    coef: Var,
) -> Result<Var, NumericError> {
    let flat = g.matmul_const(Arc::clone(basis), coef)?;
    g.reshape(flat, &[height, width, 2])
}

/// `n×n` lattice over `[-1, 1]²`, row-major with `x` varying fastest.
pub fn lattice(n: usize) -> Vec<Point> {
    let mut pts = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            pts.push([pixel_to_unit(j, n), pixel_to_unit(i, n)]);
        }
    }
    pts
}
