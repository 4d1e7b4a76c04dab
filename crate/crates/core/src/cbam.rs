//! Sequential channel then spatial attention.

use serde::{Deserialize, Serialize};

use crate::numeric::{Bound, Graph, Init, ParamId, ParamStore, PoolMode, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CbamConfig {
    pub reduction: usize,
}

impl Default for CbamConfig {
    fn default() -> Self {
        Self { reduction: 4 }
    }
}

/// Shared bottleneck MLP (`w0: [C/r, C]`, `w1: [C, C/r]`, no biases) and the 7×7
/// spatial convolution over the pooled `[2, H, W]` planes.
#[derive(Debug, Clone)]
pub struct CbamParams {
    pub mlp_w0: ParamId,
    pub mlp_w1: ParamId,
    pub spatial_kernel: ParamId,
    pub spatial_bias: ParamId,
    channels: usize,
    reduction: usize,
}

pub const SPATIAL_KERNEL: usize = 7;

impl CbamParams {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, cfg: &CbamConfig, init: &mut Init) -> Result<Self> {
        let r = cfg.reduction;
        if r == 0 || channels == 0 || channels % r != 0 {
            return Err(Error::Config(format!(
                "channel count {channels} must be a positive multiple of the reduction ratio {r}"
            )));
        }
        let hidden = channels / r;
        let k = SPATIAL_KERNEL;
        Ok(Self {
            mlp_w0: store.add(format!("{prefix}.mlp.w0"), init.fan_in(&[hidden, channels], channels)),
            mlp_w1: store.add(format!("{prefix}.mlp.w1"), init.fan_in(&[channels, hidden], hidden)),
            spatial_kernel: store.add(format!("{prefix}.spatial.weight"), init.fan_in(&[1, 2, k, k], 2 * k * k)),
            spatial_bias: store.add(format!("{prefix}.spatial.bias"), Tensor::zeros(&[1])),
            channels,
            reduction: r,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.mlp_w0, self.mlp_w1, self.spatial_kernel, self.spatial_bias]
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [c, h, w] if *c == self.channels && *h > 0 && *w > 0 => Ok(()),
            _ => Err(Error::Numeric(crate::numeric::NumericError::Dimension(format!(
                "attention built for {} channels, got input {shape:?}",
                self.channels
            )))),
        }
    }

    /// Channel gate `[C]`.
    pub fn channel_attention_var(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        self.check(g.shape(x))?;
        let mut path = |mode| -> Result<Var> {
            let d = g.global_pool(x, mode)?;
            let h = g.linear(d, p.var(self.mlp_w0), None)?;
            let h = g.relu(h);
            Ok(g.linear(h, p.var(self.mlp_w1), None)?)
        };
        let a = path(PoolMode::Average)?;
        let m = path(PoolMode::Max)?;
        let s = g.add(a, m)?;
        Ok(g.sigmoid(s))
    }

    /// Spatial gate `[1, H, W]`.
    pub fn spatial_attention_var(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        match g.shape(x) {
            [_, h, w] if *h > 0 && *w > 0 => {}
            s => {
                return Err(Error::Numeric(crate::numeric::NumericError::Dimension(format!(
                    "spatial attention needs a non-empty [C,H,W] input, got {s:?}"
                ))))
            }
        }
        let pooled = g.channel_pool(x)?;
        let s = g.conv2d(pooled, p.var(self.spatial_kernel), p.var(self.spatial_bias), 1, SPATIAL_KERNEL / 2)?;
        Ok(g.sigmoid(s))
    }

    pub fn forward_var(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mc = self.channel_attention_var(g, p, x)?;
        let fc = g.mul_channel(x, mc)?;
        let ms = self.spatial_attention_var(g, p, fc)?;
        Ok(g.mul_spatial(fc, ms)?)
    }
}

fn eval(store: &ParamStore, input: &Tensor, f: impl FnOnce(&mut Graph, &Bound, Var) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(input.clone());
    let y = f(&mut g, &p, x)?;
    Ok(g.value(y).clone())
}

pub fn channel_attention(params: &CbamParams, store: &ParamStore, input: &Tensor) -> Result<Tensor> {
    eval(store, input, |g, p, x| params.channel_attention_var(g, p, x))
}

pub fn spatial_attention(params: &CbamParams, store: &ParamStore, input: &Tensor) -> Result<Tensor> {
    eval(store, input, |g, p, x| params.spatial_attention_var(g, p, x))
}

pub fn cbam_forward(params: &CbamParams, store: &ParamStore, input: &Tensor) -> Result<Tensor> {
    eval(store, input, |g, p, x| params.forward_var(g, p, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{gradcheck_with, GradCheckOptions};

    fn setup(c: usize, seed: u64) -> (ParamStore, CbamParams) {
        let mut store = ParamStore::new();
        let p = CbamParams::new(&mut store, "cbam", c, &CbamConfig::default(), &mut Init::new(seed)).unwrap();
        (store, p)
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Direct loops over the definition.
    fn scalar_channel(store: &ParamStore, p: &CbamParams, x: &Tensor) -> Vec<f64> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let w0 = store.get(p.mlp_w0);
        let w1 = store.get(p.mlp_w1);
        let hid = w0.shape()[0];
        let mlp = |d: &[f64]| -> Vec<f64> {
            let hv: Vec<f64> = (0..hid)
                .map(|k| (0..c).map(|j| w0.at(&[k, j]) * d[j]).sum::<f64>().max(0.0))
                .collect();
            (0..c).map(|i| (0..hid).map(|k| w1.at(&[i, k]) * hv[k]).sum()).collect()
        };
        let mut gap = vec![0.0; c];
        let mut gmp = vec![f64::NEG_INFINITY; c];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    gap[ch] += x.at(&[ch, i, j]) / (h * w) as f64;
                    gmp[ch] = gmp[ch].max(x.at(&[ch, i, j]));
                }
            }
        }
        let (a, m) = (mlp(&gap), mlp(&gmp));
        a.iter().zip(&m).map(|(u, v)| sig(u + v)).collect()
    }

    fn scalar_spatial(store: &ParamStore, p: &CbamParams, x: &Tensor) -> Vec<f64> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = store.get(p.spatial_kernel);
        let b = store.get(p.spatial_bias).data()[0];
        let pooled = |plane: usize, i: usize, j: usize| -> f64 {
            let vals = (0..c).map(|ch| x.at(&[ch, i, j]));
            if plane == 0 {
                vals.fold(f64::NEG_INFINITY, f64::max)
            } else {
                vals.sum::<f64>() / c as f64
            }
        };
        let mut out = Vec::with_capacity(h * w);
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut s = b;
                for plane in 0..2 {
                    for di in 0..7isize {
                        for dj in 0..7isize {
                            let (y, xx) = (i + di - 3, j + dj - 3);
                            if y >= 0 && xx >= 0 && y < h as isize && xx < w as isize {
                                s += k.at(&[0, plane, di as usize, dj as usize]) * pooled(plane, y as usize, xx as usize);
                            }
                        }
                    }
                }
                out.push(sig(s));
            }
        }
        out
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn channel_gate_matches_scalar_loops() {
        for seed in 0..5 {
            let (store, p) = setup(8, seed);
            let x = Init::new(seed + 100).normal(&[8, 4, 4]);
            let got = channel_attention(&p, &store, &x).unwrap();
            assert!(close(got.data(), &scalar_channel(&store, &p, &x), 1e-12));
            assert!(got.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn spatial_gate_matches_scalar_loops() {
        for seed in 0..5 {
            let (store, p) = setup(4, seed);
            let x = Init::new(seed + 200).normal(&[4, 6, 6]);
            let got = spatial_attention(&p, &store, &x).unwrap();
            assert_eq!(got.shape(), &[1, 6, 6]);
            assert!(close(got.data(), &scalar_spatial(&store, &p, &x), 1e-12));
        }
    }

    #[test]
    fn zero_parameters_give_half_gates() {
        let (mut store, p) = setup(8, 0);
        for id in p.ids() {
            let s = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&s);
        }
        let x = Init::new(1).normal(&[8, 5, 3]);
        assert!(channel_attention(&p, &store, &x).unwrap().data().iter().all(|&v| v == 0.5));
        assert!(spatial_attention(&p, &store, &x).unwrap().data().iter().all(|&v| v == 0.5));
        let y = cbam_forward(&p, &store, &x).unwrap();
        assert!(close(y.data(), x.scale(0.25).data(), 0.0));
    }

    #[test]
    fn constant_map_pools_agree() {
        let (store, p) = setup(4, 3);
        let vals = [0.3, -1.2, 2.0, 0.7];
        let x = Tensor::from_fn(&[4, 3, 3], |i| vals[i / 9]);
        let got = channel_attention(&p, &store, &x).unwrap();
        // GAP == GMP, so the gate is sigmoid(2 * MLP(g)).
        let w0 = store.get(p.mlp_w0);
        let w1 = store.get(p.mlp_w1);
        for i in 0..4 {
            let m: f64 = (0..1)
                .map(|k| w1.at(&[i, k]) * (0..4).map(|j| w0.at(&[k, j]) * vals[j]).sum::<f64>().max(0.0))
                .sum();
            assert!((got.data()[i] - sig(2.0 * m)).abs() < 1e-15);
        }
    }

    #[test]
    fn single_channel_pools_are_copies() {
        let x = Init::new(2).normal(&[1, 4, 5]);
        let (pooled, _) = crate::numeric::ops::channel_pool(&x).unwrap();
        assert_eq!(&pooled.data()[..20], x.data());
        assert_eq!(&pooled.data()[20..], x.data());
    }

    #[test]
    fn forward_composes_and_attenuates() {
        for seed in 0..5 {
            let (store, p) = setup(8, seed);
            let x = Init::new(seed + 7).normal(&[8, 5, 6]);
            let y = cbam_forward(&p, &store, &x).unwrap();
            assert_eq!(y.shape(), x.shape());
            let mc = scalar_channel(&store, &p, &x);
            let fc = Tensor::from_fn(&[8, 5, 6], |i| x.data()[i] * mc[i / 30]);
            let ms = scalar_spatial(&store, &p, &fc);
            let manual: Vec<f64> = fc.data().iter().enumerate().map(|(i, v)| v * ms[i % 30]).collect();
            assert!(close(y.data(), &manual, 1e-12));
            assert!(y.data().iter().zip(x.data()).all(|(a, b)| a.abs() <= b.abs()));
            let xp = x.map(f64::abs);
            let yp = cbam_forward(&p, &store, &xp).unwrap();
            assert!(yp.data().iter().zip(xp.data()).all(|(a, b)| *a >= 0.0 && a <= b));
        }
    }

    #[test]
    fn channel_permutation_equivariance() {
        let (store, p) = setup(8, 9);
        let x = Init::new(10).normal(&[8, 4, 4]);
        let perm = [3usize, 0, 7, 5, 1, 6, 2, 4];
        let mut ps = store.clone();
        let w0 = store.get(p.mlp_w0).clone();
        let w1 = store.get(p.mlp_w1).clone();
        // Permute w0 columns and w1 rows consistently with the input channels.
        *ps.get_mut(p.mlp_w0) = Tensor::from_fn(w0.shape(), |i| {
            let (k, j) = (i / 8, i % 8);
            w0.at(&[k, perm[j]])
        });
        *ps.get_mut(p.mlp_w1) = Tensor::from_fn(w1.shape(), |i| {
            let (r, k) = (i / 2, i % 2);
            w1.at(&[perm[r], k])
        });
        let xp = Tensor::from_fn(&[8, 4, 4], |i| x.data()[perm[i / 16] * 16 + i % 16]);
        let a = channel_attention(&p, &store, &x).unwrap();
        let b = channel_attention(&p, &ps, &xp).unwrap();
        for i in 0..8 {
            assert!((b.data()[i] - a.data()[perm[i]]).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_channels() {
        let mut store = ParamStore::new();
        assert!(CbamParams::new(&mut store, "c", 6, &CbamConfig::default(), &mut Init::new(0)).is_err());
        let (store, p) = setup(8, 0);
        assert!(cbam_forward(&p, &store, &Tensor::zeros(&[4, 3, 3])).is_err());
    }

    #[test]
    fn gradients_wrt_input_and_parameters() {
        for seed in 0..3 {
            let (store, p) = setup(8, seed);
            let mut init = Init::new(seed + 50);
            let x = init.normal(&[8, 5, 5]);
            let proj = init.normal(&[8, 5, 5]);
            let ids = p.ids();
            let mut inputs = vec![x];
            inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
            let opts = GradCheckOptions {
                max_coords_per_input: Some(60),
                seed,
                ..GradCheckOptions::default()
            };
            let r = gradcheck_with(
                "cbam_forward",
                |g, v| {
                    let mut b = store.bind(g);
                    for (id, var) in ids.iter().zip(&v[1..]) {
                        b.replace(*id, *var);
                    }
                    let y = p.forward_var(g, &b, v[0])?;
                    Ok::<_, Error>(g.dot_const(y, &proj)?)
                },
                &inputs,
                &opts,
            )
            .unwrap();
            assert!(r.pass, "{r}");
            assert!(!r.inconclusive);
        }
    }
}
