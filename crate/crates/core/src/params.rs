//! Named trainable parameters and their binding onto a [`Tape`].

use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Gaussian init with standard deviation `1/√rows` (fan-in of a
    /// row-vector-times-matrix product).
    pub fn add_linear<R: Rng + ?Sized>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let std = 1.0 / (rows.max(1) as f64).sqrt();
        self.add(name, Tensor::randn(rows, cols, std, rng))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Replaces every tensor, keeping names. Shapes must match.
    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::Shape(format!("expected {} tensors, got {}", self.tensors.len(), tensors.len())));
        }
        for (i, (old, new)) in self.tensors.iter().zip(&tensors).enumerate() {
            if old.shape() != new.shape() {
                return Err(Error::Shape(format!(
                    "{}: stored {:?}, replacement {:?}",
                    self.names[i],
                    old.shape(),
                    new.shape()
                )));
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    /// Registers every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| Some(tape.param(t.clone()))).collect(),
        }
    }

    /// Registers only `ids`; other parameters are unavailable on the tape.
    pub fn bind_only(&self, tape: &mut Tape, ids: &[ParamId]) -> Bound {
        let mut vars = vec![None; self.tensors.len()];
        for id in ids {
            vars[id.0] = Some(tape.param(self.tensors[id.0].clone()));
        }
        Bound { vars }
    }
}

/// Mapping from parameters to the tape variables holding them.
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    /// Wraps variables already placed on a tape, in store order.
    pub fn from_vars(vars: &[Var]) -> Self {
        Bound {
            vars: vars.iter().copied().map(Some).collect(),
        }
    }

    /// Gradients of every bound parameter in store order; zeros when a
    /// parameter did not influence the output.
    pub fn gradients(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.tensors())
            .map(|(v, t)| match v {
                Some(v) => grads.get_or_zeros(*v, t.shape()),
                None => Tensor::zeros(t.rows(), t.cols()),
            })
            .collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        self.vars[id.0]
            .as_ref()
            .unwrap_or_else(|| panic!("parameter {} not bound on this tape", id.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_and_collect_gradients() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full(1, 2, 2.0));
        let b = store.add("b", Tensor::full(1, 1, 1.0));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let sq = tape.mul(bound[a], bound[a]).unwrap();
        let s = tape.sum(sq).unwrap();
        let grads = tape.backward(s).unwrap();
        let g = bound.gradients(&grads, &store);
        assert_eq!(g[0].data(), &[4.0, 4.0]);
        assert_eq!(g[1].data(), &[0.0]);
        assert_eq!(store.name(b), "b");
        assert_eq!(store.id("a"), Some(a));
    }

    #[test]
    fn set_tensors_checks_shapes() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(2, 2));
        assert!(store.set_tensors(vec![Tensor::zeros(1, 4)]).is_err());
        assert!(store.set_tensors(vec![Tensor::full(2, 2, 1.0)]).is_ok());
    }
}
