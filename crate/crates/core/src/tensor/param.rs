use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// A named, optionally trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
}

/// Parameters keyed by unique name. Iteration order is the name order, which
/// keeps checkpoints and optimizer updates deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Usage(format!("duplicate parameter name {name}")));
        }
        self.params.insert(
            name.to_string(),
            Parameter {
                name: name.to_string(),
                value,
                grad: None,
                trainable,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    /// Replace a parameter's value, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(shape_err(
                "set_value",
                format!("{name}: {:?} vs {:?}", p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    /// Set the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.values_mut() {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.set_trainable("", trainable);
    }

    /// Copy every parameter of `other` whose name also exists here.
    /// Returns the names copied.
    pub fn copy_matching(&mut self, other: &ParamStore) -> Result<Vec<String>> {
        let mut copied = Vec::new();
        for p in other.iter() {
            if self.contains(&p.name) {
                self.set_value(&p.name, p.value.clone())?;
                copied.push(p.name.clone());
            }
        }
        Ok(copied)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2]), true).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[2]), true).is_err());
    }

    #[test]
    fn prefix_freezing() {
        let mut s = ParamStore::new();
        s.insert("backbone.w", Tensor::zeros(&[2]), true).unwrap();
        s.insert("head.w", Tensor::zeros(&[2]), true).unwrap();
        s.set_trainable("backbone.", false);
        assert!(!s.get("backbone.w").unwrap().trainable);
        assert!(s.get("head.w").unwrap().trainable);
    }

    #[test]
    fn set_value_checks_shape() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2]), true).unwrap();
        assert!(s.set_value("a", Tensor::zeros(&[3])).is_err());
    }
}
