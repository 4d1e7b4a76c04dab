//! Recorded computation sequence for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and a [`Backward`]
//! object that maps the output gradient onto its inputs. [`Graph::backward`]
//! replays the nodes in reverse order.

use std::sync::Arc;

use super::ops::{self, Conv2dGeometry, PoolMode};
use super::{NumericError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward half of an operation: given the gradient of the output, produce
/// gradients for the inputs flagged in `needs`.
pub trait Backward {
    fn backward(
        &self,
        grad_out: &[f64],
        inputs: &[&Tensor],
        output: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    track_branches: bool,
    branch: u64,
}

/// Gradients of a scalar root with respect to every node that required them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, or zeros of the given length when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that fingerprints every discrete branch decision (ReLU signs, argmax
    /// winners, interpolation cells, clamps). Used by the finite-difference checker
    /// to detect perturbations that cross a non-differentiable point.
    pub fn with_branch_tracking() -> Self {
        Self {
            track_branches: true,
            branch: 0xcbf2_9ce4_8422_2325,
            ..Self::default()
        }
    }

    pub fn tracks_branches(&self) -> bool {
        self.track_branches
    }

    pub fn branch_signature(&self) -> u64 {
        self.branch
    }

    pub fn note_branch(&mut self, key: u64) {
        if self.track_branches {
            self.branch = (self.branch ^ key).wrapping_mul(FNV_PRIME);
        }
    }

    pub fn note_branches(&mut self, keys: impl IntoIterator<Item = u64>) {
        if self.track_branches {
            for k in keys {
                self.branch = (self.branch ^ k).wrapping_mul(FNV_PRIME);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input (parameter or variable under test).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a custom operation. `value` must already be computed from `inputs`.
    pub fn push(&mut self, value: Tensor, inputs: &[Var], op: Box<dyn Backward>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            op: requires_grad.then_some(op),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a single-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients, NumericError> {
        if self.value(root).len() != 1 {
            return Err(NumericError::Dimension(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let in_grads = op.backward(&g, &inputs, &node.value, &needs);
            for ((v, need), ig) in node.inputs.iter().zip(&needs).zip(in_grads) {
                if !need {
                    continue;
                }
                let Some(ig) = ig else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
            // keep the root's and leaves' gradients, drop intermediates
            if idx == root.0 {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, NumericError> {
        let (out, geo, col) =
            ops::conv2d_forward(self.value(x), self.value(kernel), self.value(bias), stride, padding)?;
        Ok(self.push(out, &[x, kernel, bias], Box::new(Conv2dBack { geo, col })))
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var, NumericError> {
        let out = ops::avg_pool(self.value(x), k)?;
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, &[x], Box::new(AvgPoolBack { shape, k })))
    }

    pub fn global_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var, NumericError> {
        let (out, argmax) = ops::global_pool(self.value(x), mode)?;
        self.note_branches(argmax.iter().map(|&a| a as u64));
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, &[x], Box::new(GlobalPoolBack { shape, mode, argmax })))
    }

    /// `[C,H,W] -> [2,H,W]`: channelwise max (plane 0) then channelwise mean (plane 1).
    pub fn channel_pool(&mut self, x: Var) -> Result<Var, NumericError> {
        let (out, argmax) = ops::channel_pool(self.value(x))?;
        self.note_branches(argmax.iter().map(|&a| a as u64));
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, &[x], Box::new(ChannelPoolBack { shape, argmax })))
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var, NumericError> {
        let out = ops::linear(self.value(x), self.value(weight), bias.map(|b| self.value(b)))?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(out, &inputs, Box::new(LinearBack)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(ops::relu);
        if self.track_branches {
            let signs: Vec<u64> = self.value(x).data().iter().map(|&v| (v > 0.0) as u64).collect();
            self.note_branches(signs);
        }
        self.push(out, &[x], Box::new(Elementwise::Relu))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(ops::sigmoid);
        self.push(out, &[x], Box::new(Elementwise::Sigmoid))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, &[x], Box::new(Elementwise::Tanh))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, &[x], Box::new(Elementwise::Square))
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        let out = self.value(x).scale(alpha);
        self.push(out, &[x], Box::new(Elementwise::Scale(alpha)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.binary(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.binary(a, b, BinaryOp::Mul)
    }

    fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var, NumericError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumericError::Dimension(format!(
                "elementwise operands {:?} and {:?} differ in shape",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
            })
            .collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, &[a, b], Box::new(op)))
    }

    /// Adds a constant tensor of the same shape.
    pub fn shift(&mut self, x: Var, offset: &Tensor) -> Result<Var, NumericError> {
        let c = self.constant(offset.clone());
        self.add(x, c)
    }

    /// `[C,H,W] ⊙ [C]` broadcast over the spatial axes.
    pub fn mul_channel(&mut self, x: Var, gate: Var) -> Result<Var, NumericError> {
        let (tx, tg) = (self.value(x), self.value(gate));
        tx.expect_rank(3, "mul_channel input")?;
        if tg.shape() != [tx.shape()[0]] {
            return Err(NumericError::Dimension(format!(
                "channel gate {:?} does not match input {:?}",
                tg.shape(),
                tx.shape()
            )));
        }
        let hw = tx.shape()[1] * tx.shape()[2];
        let mut data = tx.data().to_vec();
        for (plane, &g) in data.chunks_mut(hw.max(1)).zip(tg.data()) {
            plane.iter_mut().for_each(|v| *v *= g);
        }
        let out = Tensor::new(tx.shape(), data)?;
        Ok(self.push(out, &[x, gate], Box::new(MulChannelBack)))
    }

    /// `[C,H,W] ⊙ [1,H,W]` broadcast over channels.
    pub fn mul_spatial(&mut self, x: Var, gate: Var) -> Result<Var, NumericError> {
        let (tx, tg) = (self.value(x), self.value(gate));
        tx.expect_rank(3, "mul_spatial input")?;
        if tg.shape() != [1, tx.shape()[1], tx.shape()[2]] {
            return Err(NumericError::Dimension(format!(
                "spatial gate {:?} does not match input {:?}",
                tg.shape(),
                tx.shape()
            )));
        }
        let hw = tx.shape()[1] * tx.shape()[2];
        let mut data = tx.data().to_vec();
        for plane in data.chunks_mut(hw.max(1)) {
            plane.iter_mut().zip(tg.data()).for_each(|(v, &g)| *v *= g);
        }
        let out = Tensor::new(tx.shape(), data)?;
        Ok(self.push(out, &[x, gate], Box::new(MulSpatialBack)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericError> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, &[x], Box::new(Elementwise::Identity)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, &[x], Box::new(SumBack(1.0)))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let out = Tensor::scalar(self.value(x).sum() / n);
        self.push(out, &[x], Box::new(SumBack(1.0 / n)))
    }

    /// Scalar `Σ x ⊙ weights` with fixed weights; a handy random projection for checks.
    pub fn dot_const(&mut self, x: Var, weights: &Tensor) -> Result<Var, NumericError> {
        let tx = self.value(x);
        if tx.len() != weights.len() {
            return Err(NumericError::Dimension(format!(
                "projection weights {:?} do not match {:?}",
                weights.shape(),
                tx.shape()
            )));
        }
        let v: f64 = tx.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(
            Tensor::scalar(v),
            &[x],
            Box::new(DotConstBack(weights.data().to_vec())),
        ))
    }

    /// `M · x` with a constant matrix `M: [a,b]` and `x: [b,c]`.
    pub fn matmul_const(&mut self, m: Arc<Tensor>, x: Var) -> Result<Var, NumericError> {
        let tx = self.value(x);
        m.expect_rank(2, "matmul_const matrix")?;
        tx.expect_rank(2, "matmul_const operand")?;
        let (a, b) = (m.shape()[0], m.shape()[1]);
        if tx.shape()[0] != b {
            return Err(NumericError::Dimension(format!(
                "cannot multiply {:?} by {:?}",
                m.shape(),
                tx.shape()
            )));
        }
        let c = tx.shape()[1];
        let mut out = vec![0.0; a * c];
        ops::gemm(a, b, c, m.data(), false, tx.data(), false, 0.0, &mut out);
        let out = Tensor::new(&[a, c], out)?;
        Ok(self.push(out, &[x], Box::new(MatmulConstBack(m))))
    }
}

struct Conv2dBack {
    geo: Conv2dGeometry,
    col: Vec<f64>,
}

impl Backward for Conv2dBack {
    fn backward(&self, g: &[f64], inputs: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let grads = ops::conv2d_backward(&self.geo, &self.col, inputs[1].data(), g, needs[0]);
        vec![grads.input, Some(grads.kernel), Some(grads.bias)]
    }
}

struct AvgPoolBack {
    shape: Vec<usize>,
    k: usize,
}

impl Backward for AvgPoolBack {
    fn backward(&self, g: &[f64], _: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(ops::avg_pool_backward(&self.shape, self.k, g))]
    }
}

struct GlobalPoolBack {
    shape: Vec<usize>,
    mode: PoolMode,
    argmax: Vec<usize>,
}

impl Backward for GlobalPoolBack {
    fn backward(&self, g: &[f64], _: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(ops::global_pool_backward(&self.shape, self.mode, &self.argmax, g))]
    }
}

struct ChannelPoolBack {
    shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl Backward for ChannelPoolBack {
    fn backward(&self, g: &[f64], _: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(ops::channel_pool_backward(&self.shape, &self.argmax, g))]
    }
}

struct LinearBack;

impl Backward for LinearBack {
    fn backward(&self, g: &[f64], inputs: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (m, n) = (w.shape()[0], w.shape()[1]);
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; n];
            ops::gemm(1, m, n, g, false, w.data(), false, 0.0, &mut dx);
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![0.0; m * n];
            ops::gemm(m, 1, n, g, false, x.data(), false, 0.0, &mut dw);
            dw
        });
        let mut out = vec![dx, dw];
        if inputs.len() == 3 {
            out.push(Some(g.to_vec()));
        }
        out
    }
}

enum Elementwise {
    Relu,
    Sigmoid,
    Tanh,
    Square,
    Scale(f64),
    Identity,
}

impl Backward for Elementwise {
    fn backward(&self, g: &[f64], inputs: &[&Tensor], out: &Tensor, _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        let y = out.data();
        let d: Vec<f64> = match self {
            Elementwise::Relu => g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
            Elementwise::Sigmoid => g.iter().zip(y).map(|(g, &s)| g * s * (1.0 - s)).collect(),
            Elementwise::Tanh => g.iter().zip(y).map(|(g, &t)| g * (1.0 - t * t)).collect(),
            Elementwise::Square => g.iter().zip(x).map(|(g, &x)| 2.0 * g * x).collect(),
            Elementwise::Scale(a) => g.iter().map(|g| g * a).collect(),
            Elementwise::Identity => g.to_vec(),
        };
        vec![Some(d)]
    }
}

#[derive(Clone, Copy)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl Backward for BinaryOp {
    fn backward(&self, g: &[f64], inputs: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        match self {
            BinaryOp::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
            BinaryOp::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
            BinaryOp::Mul => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                vec![
                    needs[0].then(|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
                    needs[1].then(|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
                ]
            }
        }
    }
}

struct MulChannelBack;

impl Backward for MulChannelBack {
    fn backward(&self, g: &[f64], inputs: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (x, gate) = (inputs[0], inputs[1]);
        let hw = (x.shape()[1] * x.shape()[2]).max(1);
        let dx = needs[0].then(|| {
            let mut dx = g.to_vec();
            for (plane, &s) in dx.chunks_mut(hw).zip(gate.data()) {
                plane.iter_mut().for_each(|v| *v *= s);
            }
            dx
        });
        let dg = needs[1].then(|| {
            g.chunks(hw)
                .zip(x.data().chunks(hw))
                .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                .collect()
        });
        vec![dx, dg]
    }
}

struct MulSpatialBack;

impl Backward for MulSpatialBack {
    fn backward(&self, g: &[f64], inputs: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (x, gate) = (inputs[0], inputs[1]);
        let hw = (x.shape()[1] * x.shape()[2]).max(1);
        let dx = needs[0].then(|| {
            let mut dx = g.to_vec();
            for plane in dx.chunks_mut(hw) {
                plane.iter_mut().zip(gate.data()).for_each(|(v, &s)| *v *= s);
            }
            dx
        });
        let dg = needs[1].then(|| {
            let mut dg = vec![0.0; hw];
            for (gp, xp) in g.chunks(hw).zip(x.data().chunks(hw)) {
                for p in 0..hw {
                    dg[p] += gp[p] * xp[p];
                }
            }
            dg
        });
        vec![dx, dg]
    }
}

struct SumBack(f64);

impl Backward for SumBack {
    fn backward(&self, g: &[f64], inputs: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![g[0] * self.0; inputs[0].len()])]
    }
}

struct DotConstBack(Vec<f64>);

impl Backward for DotConstBack {
    fn backward(&self, g: &[f64], _: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(self.0.iter().map(|w| w * g[0]).collect())]
    }
}

struct MatmulConstBack(Arc<Tensor>);

impl Backward for MatmulConstBack {
    fn backward(&self, g: &[f64], inputs: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let m = &self.0;
        let (a, b) = (m.shape()[0], m.shape()[1]);
        let c = inputs[0].shape()[1];
        let mut dx = vec![0.0; b * c];
        ops::gemm(b, a, c, m.data(), true, g, false, 0.0, &mut dx);
        vec![Some(dx)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[1], vec![3.0]).unwrap());
        let y = g.square(x);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let s = g.sum(z);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0, -3.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[3], 2.0));
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn branch_signature_sees_relu_flip() {
        let sig = |v: f64| {
            let mut g = Graph::with_branch_tracking();
            let x = g.leaf(Tensor::new(&[1], vec![v]).unwrap());
            g.relu(x);
            g.branch_signature()
        };
        assert_eq!(sig(0.5), sig(0.7));
        assert_ne!(sig(0.5), sig(-0.5));
    }
}
