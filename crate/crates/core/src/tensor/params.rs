use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Option<Tensor<S>>,
}

/// Named learned tensors in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
    index: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
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
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `grad` into the buffer of `id`, allocating it on first use.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[S]) -> Result<()> {
        let p = &mut self.params[id.0];
        if grad.len() != p.value.numel() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("`{}` has {} elements, gradient {}", p.name, p.value.numel(), grad.len()),
            ));
        }
        match &mut p.grad {
            Some(buf) => {
                for (b, g) in buf.data_mut().iter_mut().zip(grad) {
                    *b += *g;
                }
            }
            None => {
                p.grad = Some(Tensor::from_parts(p.value.shape().to_vec(), grad.to_vec()));
            }
        }
        Ok(())
    }

    /// Same names, shapes and bit patterns.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a
                        .value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn copy_values_from(&mut self, other: &Self) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::invalid("parameter stores differ in length"));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::invalid(format!(
                    "parameter `{}` does not match `{}`",
                    dst.name, src.name
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}
