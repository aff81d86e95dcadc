//! Named trainable tensors shared between layers, the tape and the optimizer.

use crate::error::{KwsError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            tensor: tensor.with_grad(true),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    /// Records a parameter on the tape, tagged so its gradient can be
    /// collected later with [`ParamStore::collect_grads`].
    pub fn bind(&self, tape: &mut Tape<T>, id: ParamId, requires_grad: bool) -> Var {
        tape.param(self.get(id), id.0, requires_grad)
    }

    /// Adds every bound parameter's tape gradient into its accumulator.
    /// Returns the number of parameters that received a gradient.
    pub fn collect_grads(&mut self, tape: &Tape<T>) -> Result<usize> {
        let mut touched = vec![false; self.params.len()];
        for (key, var) in tape.params() {
            let Some(g) = tape.grad(var) else { continue };
            let param = self.params.get_mut(key).ok_or_else(|| {
                KwsError::Index(format!("tape references unknown parameter {key}"))
            })?;
            param.tensor.accumulate_grad(g)?;
            touched[key] = true;
        }
        Ok(touched.into_iter().filter(|&t| t).count())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }
}
