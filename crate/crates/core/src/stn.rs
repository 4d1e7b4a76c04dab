//! Spatial transformer: a localization network predicts control-point displacements,
//! a TPS (or affine) fit turns them into a sampling grid, and the input is resampled.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::numeric::{Bound, Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::sampler::{sample_var, PaddingPolicy};
use crate::tps::{grid_basis, lattice, make_grid_var, Point, TpsSolver};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StnMode {
    Affine,
    Tps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StnConfig {
    pub grid_size: usize,
    pub lambda: f64,
    pub displacement_scale: f64,
    pub mode: StnMode,
}

impl Default for StnConfig {
    fn default() -> Self {
        Self {
            grid_size: 4,
            lambda: 0.01,
            displacement_scale: 0.25,
            mode: StnMode::Tps,
        }
    }
}

impl StnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(Error::Config(format!("grid_size must be >= 2, got {}", self.grid_size)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.displacement_scale > 0.0) || !self.displacement_scale.is_finite() {
            return Err(Error::Config(format!(
                "displacement_scale must be > 0, got {}",
                self.displacement_scale
            )));
        }
        Ok(())
    }
}

/// Two conv/ReLU/avg-pool stages (8 then 16 channels) and a zero-initialized linear
/// head producing `2·G²` raw displacement components.
///
/// `downsample` average-pools the image before the first convolution; the harness uses
/// it to look at a thumbnail instead of the full frame.
#[derive(Debug, Clone)]
pub struct LocalizationNet {
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    fc: (ParamId, ParamId),
    grid_size: usize,
    in_channels: usize,
    height: usize,
    width: usize,
    downsample: usize,
}

const MIN_LOC_SIZE: usize = 8;

impl LocalizationNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        height: usize,
        width: usize,
        grid_size: usize,
        downsample: usize,
        init: &mut Init,
    ) -> Result<Self> {
        let ds = downsample.max(1);
        let (h, w) = (height / ds, width / ds);
        if h < MIN_LOC_SIZE || w < MIN_LOC_SIZE {
            return Err(Error::Config(format!(
                "localization net needs at least {MIN_LOC_SIZE}x{MIN_LOC_SIZE} after downsampling, got {h}x{w}"
            )));
        }
        let feat = 16 * (h / 4) * (w / 4);
        let out = 2 * grid_size * grid_size;
        let conv1 = (
            store.add(format!("{prefix}.conv1.weight"), init.fan_in(&[8, in_channels, 3, 3], in_channels * 9)),
            store.add(format!("{prefix}.conv1.bias"), Tensor::zeros(&[8])),
        );
        let conv2 = (
            store.add(format!("{prefix}.conv2.weight"), init.fan_in(&[16, 8, 3, 3], 72)),
            store.add(format!("{prefix}.conv2.bias"), Tensor::zeros(&[16])),
        );
        let fc = (
            store.add(format!("{prefix}.fc.weight"), Tensor::zeros(&[out, feat])),
            store.add(format!("{prefix}.fc.bias"), Tensor::zeros(&[out])),
        );
        Ok(Self {
            conv1,
            conv2,
            fc,
            grid_size,
            in_channels,
            height,
            width,
            downsample: ds,
        })
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    /// Head parameters `(weight, bias)`.
    pub fn head(&self) -> (ParamId, ParamId) {
        self.fc
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        if shape != [self.in_channels, self.height, self.width] {
            return Err(Error::Config(format!(
                "localization net built for [{}, {}, {}], got {shape:?}",
                self.in_channels, self.height, self.width
            )));
        }
        Ok(())
    }

    /// Raw head output as a `[G², 2]` variable.
    pub fn raw_var(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<Var> {
        self.check_image(g.shape(image))?;
        let mut x = image;
        if self.downsample > 1 {
            x = g.avg_pool(x, self.downsample)?;
        }
        for (k, b) in [self.conv1, self.conv2] {
            x = g.conv2d(x, p.var(k), p.var(b), 1, 1)?;
            x = g.relu(x);
            x = g.avg_pool(x, 2)?;
        }
        let n = g.value(x).len();
        let flat = g.reshape(x, &[n])?;
        let raw = g.linear(flat, p.var(self.fc.0), Some(p.var(self.fc.1)))?;
        Ok(g.reshape(raw, &[self.grid_size * self.grid_size, 2])?)
    }

    /// Displacements `scale·tanh(raw)` as a `[G², 2]` variable.
    pub fn displacement_var(&self, g: &mut Graph, p: &Bound, image: Var, scale: f64) -> Result<Var> {
        let raw = self.raw_var(g, p, image)?;
        let t = g.tanh(raw);
        Ok(g.scale(t, scale))
    }
}

/// Predicted `[G², 2]` displacements for the regular source lattice.
pub fn localize(net: &LocalizationNet, store: &ParamStore, cfg: &StnConfig, image: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(image.clone());
    let d = net.displacement_var(&mut g, &p, x, cfg.displacement_scale)?;
    Ok(g.value(d).clone())
}

/// Localization net plus the cached fitting map and grid basis for one image size.
#[derive(Debug, Clone)]
pub struct SpatialTransformer {
    net: LocalizationNet,
    cfg: StnConfig,
    sources: Vec<Point>,
    solver: TpsSolver,
    basis: Arc<Tensor>,
}

impl SpatialTransformer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        height: usize,
        width: usize,
        cfg: StnConfig,
        downsample: usize,
        init: &mut Init,
    ) -> Result<Self> {
        cfg.validate()?;
        let net = LocalizationNet::new(store, prefix, in_channels, height, width, cfg.grid_size, downsample, init)?;
        let sources = lattice(cfg.grid_size);
        let solver = match cfg.mode {
            StnMode::Tps => TpsSolver::new(sources.clone(), cfg.lambda)?,
            StnMode::Affine => TpsSolver::affine(sources.clone())?,
        };
        let basis = Arc::new(grid_basis(&sources, height, width)?);
        Ok(Self {
            net,
            cfg,
            sources,
            solver,
            basis,
        })
    }

    pub fn net(&self) -> &LocalizationNet {
        &self.net
    }

    pub fn config(&self) -> &StnConfig {
        &self.cfg
    }

    pub fn sources(&self) -> &[Point] {
        &self.sources
    }

    /// Warps with the given `[G², 2]` displacement variable instead of the network's.
    pub fn warp_with(&self, g: &mut Graph, image: Var, displacement: Var) -> Result<Var> {
        let src = Tensor::new(
            &[self.sources.len(), 2],
            self.sources.iter().flat_map(|p| *p).collect(),
        )?;
        let targets = g.shift(displacement, &src)?;
        let coef = self.solver.solve_var(g, targets)?;
        let (h, w) = (self.net.height, self.net.width);
        let grid = make_grid_var(g, &self.basis, h, w, coef)?;
        Ok(sample_var(g, image, grid, PaddingPolicy::Zeros)?)
    }

    pub fn forward_var(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<Var> {
        let d = self.net.displacement_var(g, p, image, self.cfg.displacement_scale)?;
        self.warp_with(g, image, d)
    }
}

/// Warps `image` with the transform predicted by the network.
pub fn stn_tps_forward(stn: &SpatialTransformer, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(image.clone());
    let y = stn.forward_var(&mut g, &p, x)?;
    Ok(g.value(y).clone())
}

/// Warps `image` with fixed displacements (no network involved).
pub fn warp_with_displacements(stn: &SpatialTransformer, image: &Tensor, displacement: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let d = g.constant(displacement.clone());
    let y = stn.warp_with(&mut g, x, d)?;
    Ok(g.value(y).clone())
}
