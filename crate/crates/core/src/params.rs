//! Named parameter storage.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T: Scalar> {
    /// Hierarchical dotted path, e.g. `decoder.block3.qkv.w`.
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Ordered container of uniquely named parameters. Insertion order is the
/// canonical order used for checkpoints and reports.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter path {name}")));
        }
        let id = self.params.len();
        self.params.push(Parameter { name: name.to_string(), tensor, trainable });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Total element count of parameters whose path starts with `prefix.`.
    pub fn numel_under(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| has_prefix(&p.name, prefix))
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), tensor: p.tensor.cast(), trainable: p.trainable })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces every tensor with the one of the same name in `other`,
    /// requiring identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Structure(format!(
                "parameter count mismatch: {} vs {}",
                other.len(),
                self.len()
            )));
        }
        for p in &mut self.params {
            let src = other
                .by_name(&p.name)
                .ok_or_else(|| Error::Structure(format!("missing parameter {}", p.name)))?;
            if src.tensor.shape() != p.tensor.shape() {
                return Err(Error::Shape(format!(
                    "{}: {:?} vs {:?}",
                    p.name,
                    src.tensor.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = src.tensor.clone();
        }
        Ok(())
    }
}

/// True when `name` equals `prefix` or lies under it in the dotted hierarchy.
pub fn has_prefix(name: &str, prefix: &str) -> bool {
    name == prefix
        || (name.len() > prefix.len() && name.starts_with(prefix) && name.as_bytes()[prefix.len()] == b'.')
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_paths_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a.b", Tensor::zeros(&[2]), true).unwrap();
        assert!(s.add("a.b", Tensor::zeros(&[2]), true).is_err());
    }

    #[test]
    fn prefix_respects_path_segments() {
        assert!(has_prefix("llm.block0.w", "llm"));
        assert!(has_prefix("llm", "llm"));
        assert!(!has_prefix("llmx.w", "llm"));
    }
}
