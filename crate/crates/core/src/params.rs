//! Named parameter storage with an explicit frozen/tunable flag.

use std::collections::BTreeMap;

use crate::error::{config_err, Result};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub gradient: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// How a fresh parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Constant(Real),
    /// i.i.d. N(0, std²).
    Normal(Real),
    /// Square identity (2-D only).
    Identity,
}

impl Init {
    pub fn build(self, shape: &[usize], rng: &mut SeededRng) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Constant(v) => Tensor::full(shape, v),
            Init::Normal(std) => Tensor::randn(shape, std, rng),
            Init::Identity => {
                assert!(shape.len() == 2, "identity init needs a matrix");
                Tensor::from_fn(shape, |i| if i / shape[1] == i % shape[1] { 1.0 } else { 0.0 })
            }
        }
    }
}

/// Owns every parameter of a model. Layers refer to entries by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        let gradient = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value,
            gradient,
            trainable,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total scalar count of parameters matching `trainable`.
    pub fn count(&self, trainable: bool) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable == trainable)
            .map(Parameter::numel)
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.gradient.data_mut().fill(0.0);
        }
    }

    /// Adds `grads` into the stored gradients of trainable parameters.
    /// Entries for frozen parameters are ignored.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.iter() {
            let p = &mut self.params[id.0];
            if p.trainable {
                p.gradient.add_assign(g);
            }
        }
    }

    /// Overwrites a parameter's value, keeping its shape.
    pub fn assign(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(config_err!(
                "parameter {} has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            ));
        }
        p.value = value;
        Ok(())
    }
}

/// Gradients of a scalar with respect to trainable parameters, in
/// parameter-id order.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    entries: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub(crate) fn add(&mut self, id: ParamId, g: &Tensor) {
        match self.entries.get_mut(&id) {
            Some(acc) => acc.add_assign(g),
            None => {
                self.entries.insert(id, g.clone());
            }
        }
    }

    /// Sums `other` into `self`.
    pub fn merge(&mut self, other: &Gradients) {
        for (id, g) in other.iter() {
            self.add(id, g);
        }
    }
}
