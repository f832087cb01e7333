use std::collections::HashMap;

use super::{NumericsError, Tape, Tensor, Var};

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts (or replaces) a tensor; inserted tensors always require grad.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        let tensor = tensor.with_grad();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = tensor,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(tensor);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NumericsError> {
        self.position(name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, NumericsError> {
        match self.position(name) {
            Some(i) => Ok(&mut self.tensors[i]),
            None => Err(NumericsError::UnknownParam(name.to_string())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Places every tensor on the tape as a borrowed leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|t| tape.leaf(t)).collect(),
            index: self.index.clone(),
        }
    }

    /// Gradients (zero-filled where backward did not reach) in store order.
    pub fn collect_grads(&self, tape: &Tape<'_>, bound: &BoundParams) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, &v)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect()
    }

    /// Adds per-tensor gradient buffers (store order) into each tensor's grad slot.
    pub fn accumulate_grads(&mut self, grads: &[Vec<f64>]) -> Result<(), NumericsError> {
        if grads.len() != self.tensors.len() {
            return Err(NumericsError::Shape(format!(
                "{} gradient buffers for {} parameters",
                grads.len(),
                self.tensors.len()
            )));
        }
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            t.accumulate_grad(g)?;
        }
        Ok(())
    }
}

/// Tape handles of a bound [`ParamStore`], addressable by name.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var, NumericsError> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
