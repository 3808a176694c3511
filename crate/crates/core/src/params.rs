//! Named parameter storage shared by layers, the optimizer and checkpoints.

use rand::Rng;

use crate::error::{FecError, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether decoupled weight decay applies (matrices only).
    pub decay: bool,
}

/// Ordered parameter table. Order is creation order and is what checkpoints
/// serialize.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let decay = value.rank() >= 2;
        self.params.push(Param { name: name.into(), value, decay });
        ParamId(self.params.len() - 1)
    }

    /// Uniform fan-in scaled matrix `fan_in × fan_out` with variance `1/fan_in`.
    pub fn add_weight(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (3.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
        self.add(name, Tensor::new(vec![fan_in, fan_out], data).expect("weight shape"))
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, T::of(value)))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.value.shape() != value.shape() {
            return Err(FecError::Dimension(format!(
                "parameter {} has shape {:?}, got {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter as a tape leaf; the returned vector is indexed
    /// by [`ParamId`].
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone(), requires_grad)).collect()
    }

    /// Collects leaf gradients after `Tape::backward`, in parameter order.
    pub fn grads(&self, tape: &Tape<T>, bound: &[Var]) -> Vec<Tensor<T>> {
        bound
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), decay: p.decay })
                .collect(),
        }
    }
}
