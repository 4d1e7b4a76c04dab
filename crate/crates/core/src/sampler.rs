//! Differentiable bilinear sampling of `[C, H, W]` maps at normalized grid coordinates.

use serde::{Deserialize, Serialize};

use crate::numeric::{Backward, Graph, NumericError, Tensor, Var};
use crate::tps::{pixel_to_unit, SamplingGrid, TpsError};

/// What to read outside the input frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingPolicy {
    /// Out-of-frame taps read zero.
    #[default]
    Zeros,
    /// Coordinates are clamped to the frame edge.
    Clamp,
}

/// Coordinates this close to a pixel center (in pixel units) snap onto it, so that
/// lattice-aligned grids reproduce their input bit for bit.
const SNAP: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Taps {
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
    /// d(pixel coordinate)/d(normalized coordinate); zero where clamping is active.
    dpx: f64,
    dpy: f64,
}

fn axis_tap(u: f64, n: usize, padding: PaddingPolicy) -> (isize, f64, f64) {
    let scale = 0.5 * (n as f64 - 1.0);
    let mut p = (u + 1.0) * scale;
    let mut dp = scale;
    if padding == PaddingPolicy::Clamp {
        let hi = n as f64 - 1.0;
        if p <= 0.0 || p >= hi {
            p = p.clamp(0.0, hi);
            dp = 0.0;
        }
    }
    let r = p.round();
    if (p - r).abs() <= SNAP {
        return (r as isize, 0.0, dp);
    }
    let f = p.floor();
    (f as isize, p - f, dp)
}

fn taps(x: f64, y: f64, h: usize, w: usize, padding: PaddingPolicy) -> Taps {
    let (x0, fx, dpx) = axis_tap(x, w, padding);
    let (y0, fy, dpy) = axis_tap(y, h, padding);
    Taps {
        x0,
        y0,
        fx,
        fy,
        dpx,
        dpy,
    }
}

/// The four `(row, col, weight)` contributions of a sample point, before padding.
fn corners(t: &Taps) -> [(isize, isize, f64); 4] {
    [
        (t.y0, t.x0, (1.0 - t.fx) * (1.0 - t.fy)),
        (t.y0, t.x0 + 1, t.fx * (1.0 - t.fy)),
        (t.y0 + 1, t.x0, (1.0 - t.fx) * t.fy),
        (t.y0 + 1, t.x0 + 1, t.fx * t.fy),
    ]
}

#[inline]
fn read(plane: &[f64], h: usize, w: usize, i: isize, j: isize) -> f64 {
    if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
        0.0
    } else {
        plane[i as usize * w + j as usize]
    }
}

fn check_input(input: &Tensor) -> Result<(usize, usize, usize), NumericError> {
    match input.shape() {
        &[c, h, w] if h >= 1 && w >= 1 => Ok((c, h, w)),
        s => Err(NumericError::Dimension(format!(
            "bilinear sampling expects a non-empty [C,H,W] input, got {s:?}"
        ))),
    }
}

fn sample_raw(
    input: &Tensor,
    grid: &[f64],
    out_h: usize,
    out_w: usize,
    padding: PaddingPolicy,
) -> Result<(Tensor, Vec<Taps>), NumericError> {
    let (c, h, w) = check_input(input)?;
    if grid.len() != out_h * out_w * 2 {
        return Err(NumericError::Dimension(format!(
            "grid has {} values for {out_h}x{out_w} points",
            grid.len()
        )));
    }
    let n = out_h * out_w;
    let all_taps: Vec<Taps> = grid
        .chunks_exact(2)
        .map(|p| taps(p[0], p[1], h, w, padding))
        .collect();
    let mut out = vec![0.0; c * n];
    for ch in 0..c {
        let plane = &input.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * n..(ch + 1) * n];
        for (o, t) in dst.iter_mut().zip(&all_taps) {
            *o = corners(t)
                .iter()
                .map(|&(i, j, wt)| if wt == 0.0 { 0.0 } else { wt * read(plane, h, w, i, j) })
                .sum();
        }
    }
    Ok((Tensor::new(&[c, out_h, out_w], out)?, all_taps))
}

pub fn bilinear_sample(
    input: &Tensor,
    grid: &SamplingGrid,
    padding: PaddingPolicy,
) -> Result<Tensor, NumericError> {
    sample_raw(input, &grid.coords, grid.height, grid.width, padding).map(|(t, _)| t)
}

/// Align-corners lattice over `[-1, 1]²`.
pub fn identity_grid(height: usize, width: usize) -> Result<SamplingGrid, TpsError> {
    if height < 2 || width < 2 {
        return Err(TpsError::Config(format!(
            "sampling grids need at least 2x2 pixels, got {height}x{width}"
        )));
    }
    let mut coords = Vec::with_capacity(height * width * 2);
    for i in 0..height {
        for j in 0..width {
            coords.push(pixel_to_unit(j, width));
            coords.push(pixel_to_unit(i, height));
        }
    }
    SamplingGrid::new(height, width, coords)
}

/// Differentiable sampling: `input: [C,H,W]`, `grid: [H',W',2]` -> `[C,H',W']`.
pub fn sample_var(g: &mut Graph, input: Var, grid: Var, padding: PaddingPolicy) -> Result<Var, NumericError> {
    let (out_h, out_w) = match g.shape(grid) {
        &[a, b, 2] => (a, b),
        s => {
            return Err(NumericError::Dimension(format!(
                "sampling grid must be [H,W,2], got {s:?}"
            )))
        }
    };
    let (out, all_taps) = sample_raw(g.value(input), g.value(grid).data(), out_h, out_w, padding)?;
    if g.tracks_branches() {
        let keys: Vec<u64> = all_taps
            .iter()
            .flat_map(|t| [t.x0 as u64, t.y0 as u64, (t.dpx == 0.0) as u64, (t.dpy == 0.0) as u64])
            .collect();
        g.note_branches(keys);
    }
    Ok(g.push(out, &[input, grid], Box::new(SampleBack { taps: all_taps })))
}

struct SampleBack {
    taps: Vec<Taps>,
}

impl Backward for SampleBack {
    fn backward(&self, g: &[f64], inputs: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let input = inputs[0];
        let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let n = self.taps.len();
        let d_input = needs[0].then(|| {
            let mut d = vec![0.0; c * h * w];
            for ch in 0..c {
                let plane = &mut d[ch * h * w..(ch + 1) * h * w];
                let go = &g[ch * n..(ch + 1) * n];
                for (t, &gv) in self.taps.iter().zip(go) {
                    for (i, j, wt) in corners(t) {
                        if wt != 0.0 && i >= 0 && j >= 0 && i < h as isize && j < w as isize {
                            plane[i as usize * w + j as usize] += wt * gv;
                        }
                    }
                }
            }
            d
        });
        let d_grid = needs[1].then(|| {
            let mut d = vec![0.0; 2 * n];
            for ch in 0..c {
                let plane = &input.data()[ch * h * w..(ch + 1) * h * w];
                let go = &g[ch * n..(ch + 1) * n];
                for (p, (t, &gv)) in self.taps.iter().zip(go).enumerate() {
                    if gv == 0.0 {
                        continue;
                    }
                    let v00 = read(plane, h, w, t.y0, t.x0);
                    let v01 = read(plane, h, w, t.y0, t.x0 + 1);
                    let v10 = read(plane, h, w, t.y0 + 1, t.x0);
                    let v11 = read(plane, h, w, t.y0 + 1, t.x0 + 1);
                    let dfx = (v01 - v00) * (1.0 - t.fy) + (v11 - v10) * t.fy;
                    let dfy = (v10 - v00) * (1.0 - t.fx) + (v11 - v01) * t.fx;
                    d[2 * p] += gv * dfx * t.dpx;
                    d[2 * p + 1] += gv * dfy * t.dpy;
                }
            }
            d
        });
        vec![d_input, d_grid]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{gradcheck, Init};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn identity_grid_reproduces_input_exactly() {
        let mut init = Init::new(1);
        for (h, w) in [(2, 2), (3, 5), (17, 9), (64, 64)] {
            let x = init.normal(&[3, h, w]);
            for pad in [PaddingPolicy::Zeros, PaddingPolicy::Clamp] {
                let y = bilinear_sample(&x, &identity_grid(h, w).unwrap(), pad).unwrap();
                assert!(y.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
    }

    #[test]
    fn identity_grid_layout() {
        let g = identity_grid(2, 2).unwrap();
        assert_eq!(g.coords, vec![-1.0, -1.0, 1.0, -1.0, -1.0, 1.0, 1.0, 1.0]);
        assert_eq!(identity_grid(3, 3).unwrap().at(1, 1), [0.0, 0.0]);
        let g = identity_grid(5, 4).unwrap();
        for i in 0..5 {
            let xs: Vec<f64> = (0..4).map(|j| g.at(i, j)[0]).collect();
            let expect = [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0];
            assert!(xs.iter().zip(expect).all(|(a, b)| (a - b).abs() < 1e-15));
        }
        assert!(identity_grid(1, 4).is_err());
    }

    #[test]
    fn lattice_hit_and_center() {
        let x = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let center = SamplingGrid::new(1, 1, vec![0.0, 0.0]).unwrap();
        assert_eq!(bilinear_sample(&x, &center, PaddingPolicy::Zeros).unwrap().data(), &[1.5]);
        let hit = SamplingGrid::new(1, 1, vec![1.0, -1.0]).unwrap();
        assert_eq!(bilinear_sample(&x, &hit, PaddingPolicy::Zeros).unwrap().data(), &[1.0]);
    }

    #[test]
    fn padding_policies_differ_outside() {
        let x = Tensor::full(&[1, 3, 3], 2.0);
        let outside = SamplingGrid::new(1, 1, vec![3.0, 0.0]).unwrap();
        assert_eq!(bilinear_sample(&x, &outside, PaddingPolicy::Zeros).unwrap().data(), &[0.0]);
        assert_eq!(bilinear_sample(&x, &outside, PaddingPolicy::Clamp).unwrap().data(), &[2.0]);
    }

    /// Points at least `margin` pixels away from every cell edge.
    fn interior_grid(init: &mut Init, n: usize, h: usize, w: usize, margin: f64) -> Tensor {
        let rng = init.rng();
        let mut coords = Vec::with_capacity(2 * n);
        for _ in 0..n {
            for size in [w, h] {
                let cell = rng.gen_range(0..size - 1) as f64;
                let p = cell + rng.gen_range(margin..1.0 - margin);
                coords.push(2.0 * p / (size as f64 - 1.0) - 1.0);
            }
        }
        Tensor::new(&[1, n, 2], coords).unwrap()
    }

    #[test]
    fn gradients_wrt_input_and_grid() {
        for seed in 0..5 {
            let mut init = Init::new(seed);
            let x = init.normal(&[2, 5, 6]);
            let grid = interior_grid(&mut init, 7, 5, 6, 1e-3);
            let proj = init.normal(&[2, 1, 7]);
            for pad in [PaddingPolicy::Zeros, PaddingPolicy::Clamp] {
                let r = gradcheck(
                    "bilinear_sample",
                    |g, v| {
                        let y = sample_var(g, v[0], v[1], pad)?;
                        g.dot_const(y, &proj)
                    },
                    &[x.clone(), grid.clone()],
                    1e-5,
                    1e-4,
                )
                .unwrap();
                assert!(r.pass, "{r}");
                assert_eq!(r.skipped, 0);
            }
        }
    }

    proptest! {
        #[test]
        fn weights_partition_unity(x in -1.0f64..1.0, y in -1.0f64..1.0, h in 2usize..40, w in 2usize..40) {
            let t = taps(x, y, h, w, PaddingPolicy::Zeros);
            let s: f64 = corners(&t).iter().map(|c| c.2).sum();
            prop_assert!((s - 1.0).abs() <= 1e-15);
        }
    }
}
