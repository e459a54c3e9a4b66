use std::collections::{BTreeMap, HashMap};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{usage, Result};

const BUFFER_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

/// Whether a named entry is a non-trained buffer (batchnorm running stats).
pub fn is_buffer(name: &str) -> bool {
    BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s))
}

/// Named model tensors in insertion order.
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

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.values[i] = value,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.values.push(value);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Entries updated by the optimizer.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter().filter(|(n, _)| !is_buffer(n))
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    /// Record every entry on `tape`: trainable ones as gradient leaves,
    /// buffers as constants.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        let vars = self
            .iter()
            .map(|(n, t)| {
                let v = if is_buffer(n) {
                    tape.constant(t.clone())
                } else {
                    tape.leaf(t.clone())
                };
                (n.to_string(), v)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Parameters recorded on one tape.
#[derive(Clone)]
pub struct BoundParams<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        match self.vars.get(name) {
            Some(v) => Ok(*v),
            None => usage(format!("unknown parameter `{name}`")),
        }
    }

    /// Raw data of a buffer or parameter.
    pub fn data(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get(name)?.value().data().to_vec())
    }

    /// Gradients of every trainable entry.
    pub fn gradients(&self, grads: &Gradients) -> ParamGrads {
        ParamGrads(
            self.vars
                .iter()
                .filter(|(n, _)| !is_buffer(n))
                .map(|(n, v)| (n.clone(), grads.wrt(*v)))
                .collect(),
        )
    }
}

/// Gradient map keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads(pub BTreeMap<String, Tensor>);

impl ParamGrads {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }
}
