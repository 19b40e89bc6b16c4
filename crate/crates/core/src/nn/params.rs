use std::collections::HashMap;

use super::tape::{Mat, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors of a model, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on duplicate names; those are programming
    /// errors in model construction.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    pub fn scalar_count_with_prefix(&self, prefix: &str) -> usize {
        self.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, m)| m.len()).sum()
    }

    /// Places every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding { vars: self.values.iter().map(|m| tape.leaf(m.clone())).collect() }
    }

    /// Copies every tensor whose name starts with `prefix` from `other`.
    /// Fails on missing names or shape mismatches.
    pub fn load_prefix(&mut self, other: &ParamStore, prefix: &str) -> Result<usize, String> {
        let mut copied = 0;
        for i in 0..self.values.len() {
            if !self.names[i].starts_with(prefix) {
                continue;
            }
            let src = other
                .id(&self.names[i])
                .ok_or_else(|| format!("missing parameter {}", self.names[i]))?;
            let src = other.get(src);
            if src.dim() != self.values[i].dim() {
                return Err(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    self.names[i],
                    src.dim(),
                    self.values[i].dim()
                ));
            }
            self.values[i].assign(src);
            copied += 1;
        }
        Ok(copied)
    }

    /// Drops every tensor whose name starts with `prefix`.
    pub fn without_prefix(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, m) in self.iter() {
            if !n.starts_with(prefix) {
                out.add(n, m.clone());
            }
        }
        out
    }
}

/// Tape variables for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
