//! Named parameter storage shared by model components.

use super::io::Archive;
use super::{Gradients, Graph, NumericError, Tensor, Var};

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Parameters registered as leaves of one graph.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Routes a parameter to another variable, e.g. a gradcheck input.
    pub fn replace(&mut self, id: ParamId, var: Var) {
        self.0[id.0] = var;
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name; names are fixed by model construction.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.tensors)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.leaf(t.clone())).collect())
    }

    /// Copies gradients of a bound forward pass into each tensor's gradient buffer (accumulating).
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) -> Result<(), NumericError> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            a.insert(n.clone(), Tensor::new(t.shape(), t.data().to_vec()).expect("same shape"));
        }
        a
    }

    /// Overwrites every parameter from an archive; names and shapes must match.
    pub fn load_archive(&mut self, archive: &Archive) -> Result<(), NumericError> {
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = archive
                .get(n)
                .ok_or_else(|| NumericError::Format(format!("archive lacks parameter {n}")))?;
            if src.shape() != t.shape() {
                return Err(NumericError::Dimension(format!(
                    "parameter {n}: archive shape {:?} vs model {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}
