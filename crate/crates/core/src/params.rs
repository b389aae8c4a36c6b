//! Named tensor collections and graph binding.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Graph, Mat, Var};
use crate::error::{shape, GaiaError, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Mat> {
        self.tensors
            .get(name)
            .ok_or_else(|| GaiaError::Format(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(Mat::len).sum()
    }

    /// Entries whose name starts with any of `prefixes`.
    pub fn subset(&self, prefixes: &[&str]) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Merges `other` into `self`, overwriting duplicates.
    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }

    /// Tensors of the same names and shapes, filled with zeros.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Mat::zeros(v.dim())))
                .collect(),
        }
    }

    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(k, _)| k.as_str())
    }

    pub fn check_same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return shape(format!(
                "parameter sets differ in size ({} vs {})",
                self.tensors.len(),
                other.tensors.len()
            ));
        }
        for (k, v) in &self.tensors {
            match other.tensors.get(k) {
                Some(o) if o.dim() == v.dim() => {}
                Some(o) => return shape(format!("{k}: {:?} vs {:?}", v.dim(), o.dim())),
                None => return shape(format!("{k} missing from the other set")),
            }
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors.values().map(|v| v.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
    }
}

/// Lazily places parameters into a [`Graph`] as leaves.
pub struct Binder<'a> {
    params: &'a ParamSet,
    trainable: bool,
    vars: BTreeMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(params: &'a ParamSet, trainable: bool) -> Self {
        Self { params, trainable, vars: BTreeMap::new() }
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let value = self.params.require(name)?.clone();
        let v = g.leaf(value, self.trainable);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    /// Gradients for every bound parameter (zeros where none flowed).
    pub fn gradients(&self, g: &Graph, grads: &mut Gradients) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, v) in &self.vars {
            let grad = grads.take(*v).unwrap_or_else(|| Mat::zeros(g.value(*v).dim()));
            out.insert(name.clone(), grad);
        }
        out
    }
}
