use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named value with its gradient buffer and a frozen flag.
#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    value: Tensor,
    grad: Tensor,
    frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, frozen: bool) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self {
            name: name.into(),
            value,
            grad,
            frozen,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Mutable access to the value of a trainable parameter. Frozen
    /// parameters refuse mutation.
    pub fn value_mut(&mut self) -> Option<&mut Tensor> {
        if self.frozen {
            None
        } else {
            Some(&mut self.value)
        }
    }
}

/// Ordered collection of parameters, addressable by id or name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value, frozen));
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds `scale · grad` into the gradient buffers. Gradients addressed to
    /// frozen parameters are dropped.
    pub fn accumulate_grads(&mut self, grads: &[(ParamId, Tensor)], scale: f64) -> Result<()> {
        for (id, g) in grads {
            let p = &mut self.params[id.0];
            if p.frozen {
                continue;
            }
            if g.shape() != p.value.shape() {
                return Err(Error::dim("accumulate_grads", p.value.shape(), g.shape()));
            }
            for (dst, src) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *dst += scale * src;
            }
        }
        Ok(())
    }

    /// Overwrites every value, frozen ones included, with the same-named
    /// tensor of `source`. Both stores must hold exactly the same names,
    /// shapes and frozen flags.
    pub fn load_values_from(&mut self, source: &ParamStore) -> Result<()> {
        if source.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.len(),
                source.len()
            )));
        }
        for p in &mut self.params {
            let src = source
                .id(&p.name)
                .map(|id| source.get(id))
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            if src.frozen != p.frozen {
                return Err(Error::Checkpoint(format!("parameter `{}` has the wrong frozen flag", p.name)));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }

    /// Digest over the exact bytes of every frozen parameter.
    pub fn frozen_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| p.frozen) {
            hasher.update(p.name.as_bytes());
            hasher.update(p.value.checksum().as_bytes());
        }
        hex::encode(hasher.finalize())
    }
}
