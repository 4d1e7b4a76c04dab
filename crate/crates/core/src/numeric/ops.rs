//! Forward/backward kernel pairs for the neural primitives.
//!
//! Each kernel works on plain row-major slices so that the computation graph,
//! the finite-difference checker and the tests can all call them directly.

use super::{NumericError, Tensor};

/// Row-major `c = op(a) · op(b) + beta · c` where `op(a)` is `m×k` and `op(b)` is `k×n`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        bias: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self, NumericError> {
        if input.len() != 3 || kernel.len() != 4 || bias.len() != 1 {
            return Err(NumericError::Dimension(format!(
                "conv2d expects input [C,H,W], kernel [Co,Ci,kH,kW], bias [Co]; got {input:?}, {kernel:?}, {bias:?}"
            )));
        }
        let (c, h, w) = (input[0], input[1], input[2]);
        let (co, ci, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if ci != c {
            return Err(NumericError::Dimension(format!(
                "conv2d kernel expects {ci} input channels, input has {c}"
            )));
        }
        if bias[0] != co {
            return Err(NumericError::Dimension(format!(
                "conv2d bias has {} entries for {co} output channels",
                bias[0]
            )));
        }
        if stride == 0 {
            return Err(NumericError::Config("conv2d stride must be at least 1".into()));
        }
        if kh == 0 || kw == 0 {
            return Err(NumericError::Config("conv2d kernel has an empty extent".into()));
        }
        let out_extent = |size: usize, k: usize| -> Result<usize, NumericError> {
            let padded = size + 2 * padding;
            if padded < k || (padded - k) % stride != 0 {
                return Err(NumericError::Config(format!(
                    "conv2d output size ({size} + 2*{padding} - {k})/{stride} + 1 is not an integer"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        Ok(Self {
            in_channels: c,
            out_channels: co,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: out_extent(h, kh)?,
            out_w: out_extent(w, kw)?,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds the input into a `[Ci·kH·kW, H'·W']` patch matrix.
    pub fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let (oh, ow) = (self.out_h, self.out_w);
        let mut col = vec![0.0; self.patch_len() * self.out_len()];
        let pad = self.padding as isize;
        for c in 0..self.in_channels {
            let plane = &input[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                    for oi in 0..oh {
                        let ii = (oi * self.stride + ki) as isize - pad;
                        if ii < 0 || ii >= self.height as isize {
                            continue;
                        }
                        let src = &plane[ii as usize * self.width..(ii as usize + 1) * self.width];
                        let out_row = &mut dst[oi * ow..(oi + 1) * ow];
                        for (oj, o) in out_row.iter_mut().enumerate() {
                            let jj = (oj * self.stride + kj) as isize - pad;
                            if jj >= 0 && jj < self.width as isize {
                                *o = src[jj as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Adjoint of [`im2col`](Self::im2col): folds patch gradients back onto the input.
    pub fn col2im(&self, col: &[f64]) -> Vec<f64> {
        let (oh, ow) = (self.out_h, self.out_w);
        let mut out = vec![0.0; self.in_channels * self.height * self.width];
        let pad = self.padding as isize;
        for c in 0..self.in_channels {
            let plane = &mut out[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    let src = &col[row * oh * ow..(row + 1) * oh * ow];
                    for oi in 0..oh {
                        let ii = (oi * self.stride + ki) as isize - pad;
                        if ii < 0 || ii >= self.height as isize {
                            continue;
                        }
                        let dst = &mut plane[ii as usize * self.width..(ii as usize + 1) * self.width];
                        for oj in 0..ow {
                            let jj = (oj * self.stride + kj) as isize - pad;
                            if jj >= 0 && jj < self.width as isize {
                                dst[jj as usize] += src[oi * ow + oj];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

pub struct Conv2dGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Forward convolution. Returns the output and the unfolded patch matrix for reuse in backward.
pub fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Conv2dGeometry, Vec<f64>), NumericError> {
    let geo = Conv2dGeometry::new(input.shape(), kernel.shape(), bias.shape(), stride, padding)?;
    let col = geo.im2col(input.data());
    let hw = geo.out_len();
    let mut out = vec![0.0; geo.out_channels * hw];
    for (o, &b) in out.chunks_mut(hw).zip(bias.data()) {
        o.fill(b);
    }
    gemm(
        geo.out_channels,
        geo.patch_len(),
        hw,
        kernel.data(),
        false,
        &col,
        false,
        1.0,
        &mut out,
    );
    let out = Tensor::new(&[geo.out_channels, geo.out_h, geo.out_w], out)?;
    Ok((out, geo, col))
}

pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor, NumericError> {
    conv2d_forward(input, kernel, bias, stride, padding).map(|(out, _, _)| out)
}

pub fn conv2d_backward(
    geo: &Conv2dGeometry,
    col: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    need_input: bool,
) -> Conv2dGrads {
    let hw = geo.out_len();
    let pl = geo.patch_len();
    let mut dk = vec![0.0; geo.out_channels * pl];
    gemm(geo.out_channels, hw, pl, grad_out, false, col, true, 0.0, &mut dk);
    let db = grad_out.chunks(hw).map(|r| r.iter().sum()).collect();
    let input = need_input.then(|| {
        let mut dcol = vec![0.0; pl * hw];
        gemm(pl, geo.out_channels, hw, kernel, true, grad_out, false, 0.0, &mut dcol);
        geo.col2im(&dcol)
    });
    Conv2dGrads {
        input,
        kernel: dk,
        bias: db,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Average,
    Max,
}

/// Per-channel pooling over the whole spatial extent. Max mode also returns the flat
/// argmax offset within each channel (first occurrence on ties).
pub fn global_pool(input: &Tensor, mode: PoolMode) -> Result<(Tensor, Vec<usize>), NumericError> {
    input.expect_rank(3, "global_pool")?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if h == 0 || w == 0 {
        return Err(NumericError::Dimension("global_pool over an empty spatial extent".into()));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(c);
    let mut arg = Vec::new();
    for plane in input.data().chunks(hw) {
        match mode {
            PoolMode::Average => out.push(plane.iter().sum::<f64>() / hw as f64),
            PoolMode::Max => {
                let (i, m) = argmax_first(plane);
                out.push(m);
                arg.push(i);
            }
        }
    }
    Ok((Tensor::new(&[c], out)?, arg))
}

pub fn global_pool_backward(
    shape: &[usize],
    mode: PoolMode,
    argmax: &[usize],
    grad_out: &[f64],
) -> Vec<f64> {
    let hw = shape[1] * shape[2];
    let mut g = vec![0.0; shape[0] * hw];
    for (ch, (plane, &go)) in g.chunks_mut(hw).zip(grad_out).enumerate() {
        match mode {
            PoolMode::Average => plane.fill(go / hw as f64),
            PoolMode::Max => plane[argmax[ch]] = go,
        }
    }
    g
}

fn argmax_first(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Pools across channels: output plane 0 is the channelwise maximum, plane 1 the mean.
/// Also returns the winning channel per pixel.
pub fn channel_pool(input: &Tensor) -> Result<(Tensor, Vec<usize>), NumericError> {
    input.expect_rank(3, "channel_pool")?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if c == 0 {
        return Err(NumericError::Dimension("channel_pool over zero channels".into()));
    }
    let hw = h * w;
    let x = input.data();
    let mut out = vec![0.0; 2 * hw];
    let mut arg = vec![0usize; hw];
    let (maxp, avgp) = out.split_at_mut(hw);
    maxp.copy_from_slice(&x[..hw]);
    avgp.copy_from_slice(&x[..hw]);
    for ch in 1..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for p in 0..hw {
            if plane[p] > maxp[p] {
                maxp[p] = plane[p];
                arg[p] = ch;
            }
            avgp[p] += plane[p];
        }
    }
    for v in avgp.iter_mut() {
        *v /= c as f64;
    }
    Ok((Tensor::new(&[2, h, w], out)?, arg))
}

pub fn channel_pool_backward(shape: &[usize], argmax: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    let mut g = vec![0.0; c * hw];
    let (gmax, gavg) = grad_out.split_at(hw);
    for ch in 0..c {
        let plane = &mut g[ch * hw..(ch + 1) * hw];
        for p in 0..hw {
            plane[p] = gavg[p] / c as f64;
        }
    }
    for p in 0..hw {
        g[argmax[p] * hw + p] += gmax[p];
    }
    g
}

/// Non-overlapping `k×k` average pooling; trailing rows/columns that do not fill a window are dropped.
pub fn avg_pool(input: &Tensor, k: usize) -> Result<Tensor, NumericError> {
    input.expect_rank(3, "avg_pool")?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if k == 0 || h < k || w < k {
        return Err(NumericError::Config(format!(
            "avg_pool window {k} does not fit a {h}x{w} map"
        )));
    }
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let x = input.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh * k {
            let src = &x[(ch * h + i) * w..(ch * h + i) * w + ow * k];
            let dst = &mut out[(ch * oh + i / k) * ow..(ch * oh + i / k + 1) * ow];
            for (j, &v) in src.iter().enumerate() {
                dst[j / k] += v * norm;
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

pub fn avg_pool_backward(shape: &[usize], k: usize, grad_out: &[f64]) -> Vec<f64> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut g = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..oh * k {
            let src = &grad_out[(ch * oh + i / k) * ow..(ch * oh + i / k + 1) * ow];
            let dst = &mut g[(ch * h + i) * w..(ch * h + i) * w + ow * k];
            for (j, d) in dst.iter_mut().enumerate() {
                *d = src[j / k] * norm;
            }
        }
    }
    g
}

/// Fully connected layer `y = W·x + b` on a flattened input.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor, NumericError> {
    weight.expect_rank(2, "linear weight")?;
    let (m, n) = (weight.shape()[0], weight.shape()[1]);
    if input.len() != n {
        return Err(NumericError::Dimension(format!(
            "linear layer expects {n} inputs, got shape {:?}",
            input.shape()
        )));
    }
    let mut out = match bias {
        Some(b) if b.len() != m => {
            return Err(NumericError::Dimension(format!(
                "linear bias has {} entries for {m} outputs",
                b.len()
            )))
        }
        Some(b) => b.data().to_vec(),
        None => vec![0.0; m],
    };
    gemm(m, n, 1, weight.data(), false, input.data(), false, 1.0, &mut out);
    Tensor::new(&[m], out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::init::Init;

    fn conv_oracle(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[co, oh, ow]);
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.at(&[o]);
                    for ci in 0..c {
                        for a in 0..kh {
                            for bb in 0..kw {
                                let ii = (i * stride + a) as isize - pad as isize;
                                let jj = (j * stride + bb) as isize - pad as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                    acc += x.at(&[ci, ii as usize, jj as usize]) * k.at(&[o, ci, a, bb]);
                                }
                            }
                        }
                    }
                    out.set(&[o, i, j], acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_scaling_identity() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 1, 1], 2.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &k, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_sum_reduction() {
        let x = Tensor::new(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn conv_matches_nested_loops() {
        let mut init = Init::new(7);
        for (stride, pad, h) in [(1, 1, 5), (1, 0, 5), (2, 1, 5), (2, 0, 7)] {
            let x = init.normal(&[2, h, h]);
            let k = init.normal(&[3, 2, 3, 3]);
            let b = init.normal(&[3]);
            let y = conv2d(&x, &k, &b, stride, pad).unwrap();
            let o = conv_oracle(&x, &k, &b, stride, pad);
            assert_eq!(y.shape(), o.shape());
            assert!(y.max_abs_diff(&o) < 1e-12);
        }
    }

    #[test]
    fn conv_config_errors() {
        let x = Tensor::zeros(&[1, 64, 64]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        let b = Tensor::zeros(&[1]);
        assert!(matches!(conv2d(&x, &k, &b, 2, 1), Err(NumericError::Config(_))));
        assert!(matches!(conv2d(&x, &k, &b, 0, 1), Err(NumericError::Config(_))));
        let k2 = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(matches!(conv2d(&x, &k2, &b, 1, 1), Err(NumericError::Dimension(_))));
    }

    #[test]
    fn conv_is_linear_in_input() {
        let mut init = Init::new(3);
        let x = init.normal(&[2, 6, 6]);
        let k = init.normal(&[4, 2, 3, 3]);
        let b = Tensor::zeros(&[4]);
        let alpha = -1.7;
        let y1 = conv2d(&x.scale(alpha), &k, &b, 1, 1).unwrap();
        let y2 = conv2d(&x, &k, &b, 1, 1).unwrap().scale(alpha);
        assert!(y1.max_abs_diff(&y2) < 1e-12);
    }

    #[test]
    fn global_pool_cases() {
        let x = Tensor::full(&[1, 3, 3], 5.0);
        assert_eq!(global_pool(&x, PoolMode::Average).unwrap().0.data(), &[5.0]);
        assert_eq!(global_pool(&x, PoolMode::Max).unwrap().0.data(), &[5.0]);
        let x = Tensor::new(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(global_pool(&x, PoolMode::Average).unwrap().0.data(), &[2.5]);
        assert_eq!(global_pool(&x, PoolMode::Max).unwrap().0.data(), &[4.0]);
        assert!(global_pool(&Tensor::zeros(&[2, 0, 3]), PoolMode::Max).is_err());
    }

    #[test]
    fn global_pool_matches_loops() {
        let x = Init::new(11).normal(&[8, 7, 7]);
        let (avg, _) = global_pool(&x, PoolMode::Average).unwrap();
        let (max, _) = global_pool(&x, PoolMode::Max).unwrap();
        for c in 0..8 {
            let mut s = 0.0;
            let mut m = f64::NEG_INFINITY;
            for i in 0..7 {
                for j in 0..7 {
                    s += x.at(&[c, i, j]);
                    m = m.max(x.at(&[c, i, j]));
                }
            }
            assert!((avg.at(&[c]) - s / 49.0).abs() < 1e-12);
            assert_eq!(max.at(&[c]), m);
        }
    }

    #[test]
    fn max_pool_gradient_goes_to_first_tie() {
        let x = Tensor::new(&[1, 2, 2], vec![3., 1., 3., 2.]).unwrap();
        let (_, arg) = global_pool(&x, PoolMode::Max).unwrap();
        let g = global_pool_backward(x.shape(), PoolMode::Max, &arg, &[1.0]);
        assert_eq!(g, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_matches_loops() {
        let mut init = Init::new(5);
        let x = init.normal(&[6]);
        let w = init.normal(&[4, 6]);
        let b = init.normal(&[4]);
        let y = linear(&x, &w, Some(&b)).unwrap();
        for i in 0..4 {
            let mut acc = b.at(&[i]);
            for j in 0..6 {
                acc += w.at(&[i, j]) * x.at(&[j]);
            }
            assert!((y.at(&[i]) - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn avg_pool_roundtrip_adjoint() {
        let mut init = Init::new(9);
        let x = init.normal(&[2, 4, 6]);
        let y = avg_pool(&x, 2).unwrap();
        assert_eq!(y.shape(), &[2, 2, 3]);
        assert!((y.at(&[1, 1, 2]) - (x.at(&[1, 2, 4]) + x.at(&[1, 2, 5]) + x.at(&[1, 3, 4]) + x.at(&[1, 3, 5])) / 4.0).abs() < 1e-15);
        // <pool(x), g> == <x, pool^T(g)>
        let g = init.normal(&[2, 2, 3]);
        let gt = avg_pool_backward(x.shape(), 2, g.data());
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(&gt).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
