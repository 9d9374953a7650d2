use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Named tensors in a fixed insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid("ParamStore::insert", format!("duplicate tensor {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(move |i| &mut self.entries[i].1)
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::CheckpointShape {
                name: name.to_string(),
                found: value.shape().to_vec(),
                expected: slot.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Registers every tensor as a leaf, in store order.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_compatible<U: Scalar>(&self, other: &ParamStore<U>) -> Result<()> {
        for (name, t) in self.iter() {
            let found = other
                .get(name)
                .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
            if found.shape() != t.shape() {
                return Err(Error::CheckpointShape {
                    name: name.to_string(),
                    found: found.shape().to_vec(),
                    expected: t.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = other.names().find(|n| self.get(n).is_none()) {
            return Err(Error::invalid(
                "ParamStore",
                format!("unexpected tensor {extra}"),
            ));
        }
        Ok(())
    }
}

/// Graph handles for a [`ParamStore`], aligned with its order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles created elsewhere, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn get(&self, i: usize) -> Var {
        self.vars[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_get_set() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        s.insert("b", Tensor::zeros(&[1, 3])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[2])).is_err());
        assert_eq!(s.names().collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(s.numel(), 5);
        assert!(s.set("a", Tensor::zeros(&[3])).is_err());
        assert!(s.set("c", Tensor::zeros(&[3])).is_err());
        s.set("a", Tensor::full(&[2], 1.5)).unwrap();
        assert_eq!(s.get("a").unwrap().data(), &[1.5, 1.5]);
    }

    #[test]
    fn compatibility_names_first_offender() {
        let mut a = ParamStore::<f32>::new();
        a.insert("x", Tensor::zeros(&[2])).unwrap();
        a.insert("y", Tensor::zeros(&[2])).unwrap();
        let mut b = ParamStore::<f32>::new();
        b.insert("x", Tensor::zeros(&[2])).unwrap();
        b.insert("y", Tensor::zeros(&[3])).unwrap();
        match a.check_compatible(&b) {
            Err(Error::CheckpointShape { name, .. }) => assert_eq!(name, "y"),
            other => panic!("{other:?}"),
        }
        let mut c = ParamStore::<f32>::new();
        c.insert("y", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(a.check_compatible(&c), Err(Error::MissingTensor(n)) if n == "x"));
    }
}
