//! Named parameter snapshots: the exchange format between local training,
//! aggregation and checkpoints.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use super::{ModelGraph, ParamKind};

#[derive(Clone, Debug)]
pub struct ParamEntry<F: Element> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Option<Tensor<F>>,
    pub kind: ParamKind,
}

/// Ordered map from parameter name to tensor (plus optional gradient).
/// Iteration order is insertion order and is deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet<F: Element = f32> {
    entries: Vec<ParamEntry<F>>,
    index: HashMap<String, usize>,
}

impl<F: Element> ParameterSet<F> {
    pub fn new() -> Self {
        ParameterSet { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, entry: ParamEntry<F>) -> Result<()> {
        if self.index.contains_key(&entry.name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter name {}", entry.name)));
        }
        if let Some(g) = &entry.grad {
            if g.shape() != entry.value.shape() {
                return Err(Error::shape(
                    "ParameterSet::insert",
                    format!(
                        "gradient shape {:?} != value shape {:?} for {}",
                        g.shape(),
                        entry.value.shape(),
                        entry.name
                    ),
                ));
            }
        }
        self.index.insert(entry.name.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<F>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry<F>> {
        self.index.get(name).copied().map(move |i| &mut self.entries[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<F>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry<F>> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries whose name starts with `prefix`, in order.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a ParamEntry<F>> {
        self.entries.iter().filter(move |e| e.name.starts_with(prefix))
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }

    /// Snapshot of a model's parameters (and buffers).
    pub fn from_model(model: &ModelGraph<F>, with_grads: bool) -> Self {
        let mut set = ParameterSet::new();
        model.visit_params(&mut |p| {
            set.insert(ParamEntry {
                name: p.name,
                value: p.value.clone(),
                grad: if with_grads { p.grad.cloned() } else { None },
                kind: p.kind,
            })
            .expect("model parameter names are unique");
        });
        set
    }

    /// Write values back into a model. Every model parameter must be present
    /// with a matching shape; unknown names in `self` are an error.
    pub fn load_into(&self, model: &mut ModelGraph<F>) -> Result<()> {
        let mut seen = 0usize;
        let mut err = None;
        model.visit_params_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            match self.get(&p.name) {
                Some(e) if e.value.shape() == p.value.shape() => {
                    p.value.data_mut().copy_from_slice(e.value.data());
                    seen += 1;
                }
                Some(e) => {
                    err = Some(Error::shape(
                        "ParameterSet::load_into",
                        format!(
                            "shape mismatch for {}: {:?} vs {:?}",
                            p.name,
                            e.value.shape(),
                            p.value.shape()
                        ),
                    ));
                }
                None => {
                    err = Some(Error::InvalidConfig(format!("missing parameter {}", p.name)));
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != self.len() {
            return Err(Error::InvalidConfig(format!(
                "parameter set has {} entries but model consumed {seen}",
                self.len()
            )));
        }
        Ok(())
    }

    /// Load only the entries present in `self`, leaving other model
    /// parameters untouched (used to push shared block weights).
    pub fn load_partial(&self, model: &mut ModelGraph<F>) -> Result<()> {
        let mut seen = 0usize;
        let mut err = None;
        model.visit_params_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            if let Some(e) = self.get(&p.name) {
                if e.value.shape() != p.value.shape() {
                    err = Some(Error::shape(
                        "ParameterSet::load_partial",
                        format!("shape mismatch for {}", p.name),
                    ));
                    return;
                }
                p.value.data_mut().copy_from_slice(e.value.data());
                seen += 1;
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != self.len() {
            return Err(Error::InvalidConfig(format!(
                "parameter set has {} entries but model matched {seen}",
                self.len()
            )));
        }
        Ok(())
    }

    /// Sub-set of entries under `prefix` (cloned).
    pub fn subset(&self, prefix: &str) -> ParameterSet<F> {
        let mut out = ParameterSet::new();
        for e in self.with_prefix(prefix) {
            out.insert(e.clone()).unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterSet::<f32>::new();
        let e = ParamEntry {
            name: "w".into(),
            value: Tensor::zeros(&[2]),
            grad: None,
            kind: ParamKind::Trainable,
        };
        s.insert(e.clone()).unwrap();
        assert!(s.insert(e).is_err());
    }

    #[test]
    fn grad_shape_must_match() {
        let mut s = ParameterSet::<f32>::new();
        let e = ParamEntry {
            name: "w".into(),
            value: Tensor::zeros(&[2]),
            grad: Some(Tensor::zeros(&[3])),
            kind: ParamKind::Trainable,
        };
        assert!(s.insert(e).is_err());
    }
}
