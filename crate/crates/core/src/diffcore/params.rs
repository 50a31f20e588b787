//! Named trainable tensors and batch-norm running statistics.

use crate::diffcore::kernels::BnState;
use crate::diffcore::tensor::Tensor;
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BnId(usize);

impl BnId {
    pub(crate) fn new(i: usize) -> Self {
        Self(i)
    }
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of parameters. Order is the checkpoint order and the order
/// in which [`crate::diffcore::Graph::bind`] exposes them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    bn_names: Vec<String>,
    bn: Vec<BnState<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), bn_names: Vec::new(), bn: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn add_bn(&mut self, name: impl Into<String>, channels: usize) -> BnId {
        self.bn_names.push(name.into());
        self.bn.push(BnState::new(channels));
        BnId(self.bn.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Parameters whose name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.names.iter().enumerate().filter(move |(_, n)| n.starts_with(prefix)).map(|(i, _)| ParamId(i))
    }

    pub fn bn_states(&self) -> &[BnState<T>] {
        &self.bn
    }

    pub fn bn_names(&self) -> &[String] {
        &self.bn_names
    }

    pub fn bn_state_mut(&mut self, id: BnId) -> &mut BnState<T> {
        &mut self.bn[id.0]
    }

    /// Adopts running statistics produced by a graph built from this store.
    pub fn set_bn_states(&mut self, states: &[BnState<T>]) -> Result<()> {
        if states.len() < self.bn.len() {
            return Err(shape_err!("expected {} batch-norm states, got {}", self.bn.len(), states.len()));
        }
        let n = self.bn.len();
        self.bn.clone_from_slice(&states[..n]);
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            bn_names: self.bn_names.clone(),
            bn: self
                .bn
                .iter()
                .map(|s| BnState {
                    mean: s.mean.iter().map(|&v| U::lit(v.as_f64())).collect(),
                    var: s.var.iter().map(|&v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}
