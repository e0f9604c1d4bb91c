use std::collections::HashMap;

use super::{Gradients, NumericsError, Tape, Tensor, Var};

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), NumericsError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumericsError::DuplicateName(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.index_of(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn by_index(&self, i: usize) -> (&str, &Tensor) {
        let (n, t) = &self.entries[i];
        (n, t)
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar entries across all tensors.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        for (_, t) in &mut self.entries {
            t.set_requires_grad(flag);
        }
    }

    pub fn clear_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.clear_grad();
        }
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind<'a>(&'a self, tape: &mut Tape) -> Binding<'a> {
        let vars = self.entries.iter().map(|(_, t)| tape.leaf(t)).collect();
        Binding { params: self, vars }
    }

    /// Copies gradients for bound parameters into their grad slots.
    /// Parameters that require grad but were not reached get zeros.
    pub fn store_grads(&mut self, vars: &[Var], grads: &Gradients) {
        for ((_, t), &v) in self.entries.iter_mut().zip(vars) {
            if !t.requires_grad() {
                continue;
            }
            let g = grads
                .get(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            t.set_grad(g).expect("gradient length follows the bound tensor");
        }
    }
}

/// Tape handles for every parameter of a [`ParamSet`].
pub struct Binding<'a> {
    params: &'a ParamSet,
    vars: Vec<Var>,
}

impl Binding<'_> {
    pub fn var(&self, name: &str) -> Result<Var, NumericsError> {
        self.params
            .index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn into_vars(self) -> Vec<Var> {
        self.vars
    }
}
