//! Named parameter and buffer storage.
//!
//! Entries keep insertion order, which fixes the optimizer update order and
//! the checkpoint layout.

use ndarray::ArrayD;
use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct Entry {
    pub name: String,
    pub value: ArrayD<f64>,
    pub trainable: bool,
}

/// Ordered collection of named arrays: trainable parameters plus
/// non-trainable buffers (running batch statistics).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub(crate) entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter. Names must be unique.
    pub fn add_param(&mut self, name: &str, value: ArrayD<f64>) -> Result<usize> {
        self.add(name, value, true)
    }

    /// Registers a non-trainable buffer.
    pub fn add_buffer(&mut self, name: &str, value: ArrayD<f64>) -> Result<usize> {
        self.add(name, value, false)
    }

    fn add(&mut self, name: &str, value: ArrayD<f64>, trainable: bool) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name:?}")));
        }
        let id = self.entries.len();
        self.index.insert(name.to_string(), id);
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            trainable,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name:?}")))
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].value)
    }

    pub fn value(&self, id: usize) -> &ArrayD<f64> {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut ArrayD<f64> {
        &mut self.entries[id].value
    }

    pub fn name(&self, id: usize) -> &str {
        &self.entries[id].name
    }

    pub fn is_trainable(&self, id: usize) -> bool {
        self.entries[id].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Ids of trainable parameters in insertion order.
    pub fn trainable_ids(&self) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].trainable)
            .collect()
    }

    /// Names in insertion order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Total element count, optionally restricted to trainable parameters.
    pub fn num_elements(&self, trainable_only: bool) -> usize {
        self.entries
            .iter()
            .filter(|e| !trainable_only || e.trainable)
            .map(|e| e.value.len())
            .sum()
    }
}
