use std::collections::BTreeMap;

use super::{Gradients, Real, Tensor};
use crate::error::{contract_err, dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named learnable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

/// Insertion-ordered collection of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(contract_err!("duplicate parameter name {name}"));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            requires_grad: true,
            grad: None,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn set_requires_grad(&mut self, id: ParamId, flag: bool) {
        self.params[id.0].requires_grad = flag;
    }

    /// Adds the parameter gradients found in `grads` onto the stored ones.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.param_grads() {
            let p = &mut self.params[id.0];
            if !p.requires_grad {
                continue;
            }
            match &mut p.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                None => p.grad = Some(g.to_vec()),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| contract_err!("unknown parameter {name}"))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(dim_err!(
                "parameter {name} has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}
