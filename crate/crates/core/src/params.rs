//! Named parameter storage. Keys are insertion indices.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor and returns its key. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let key = self.values.len();
        self.index.insert(name.clone(), key);
        self.names.push(name);
        self.values.push(value);
        key
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, key: usize) -> &Tensor {
        &self.values[key]
    }

    pub fn get_mut(&mut self, key: usize) -> &mut Tensor {
        &mut self.values[key]
    }

    pub fn name(&self, key: usize) -> &str {
        &self.names[key]
    }

    pub fn key(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(k, (n, v))| (k, n.as_str(), v))
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, key: usize, value: Tensor) -> Result<()> {
        if value.shape() != self.values[key].shape() {
            return Err(Error::shape(format!(
                "parameter {}: expected {:?}, got {:?}",
                self.names[key],
                self.values[key].shape(),
                value.shape()
            )));
        }
        self.values[key] = value;
        Ok(())
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }
}
