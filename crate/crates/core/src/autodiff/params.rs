use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AutodiffError, Gradients, Tape, Tensor, Var};

/// Position of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

/// Vars of every parameter after [`ParamStore::bind`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps vars already recorded in store order, e.g. by a gradient checker.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.names.len() - 1)
    }

    /// Weight matrix drawn uniformly from ±1/√fan_in.
    pub fn insert_uniform(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, data).expect("sized"))
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on the tape, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound, AutodiffError> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Bound { vars })
    }

    /// Gradients of all parameters, aligned with the store.
    pub fn gradients(&self, bound: &Bound, grads: &Gradients) -> Vec<Tensor> {
        bound.vars.iter().map(|&v| grads.get(v)).collect()
    }

    /// Replaces every tensor; shapes must match.
    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) -> Result<(), AutodiffError> {
        if tensors.len() != self.tensors.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "set_tensors",
                detail: format!("{} tensors for {} parameters", tensors.len(), self.tensors.len()),
            });
        }
        for (i, (new, old)) in tensors.iter().zip(&self.tensors).enumerate() {
            if new.shape() != old.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "set_tensors",
                    detail: format!("{}: {:?} vs {:?}", self.names[i], new.shape(), old.shape()),
                });
            }
        }
        self.tensors = tensors;
        Ok(())
    }
}
