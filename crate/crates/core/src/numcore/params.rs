//! Named trainable tensors and their on-disk checkpoint layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    file: String,
    shape: Vec<usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Writes `params.json` plus one PDT1 blob per parameter under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let blobs = dir.join("params");
        fs::create_dir_all(&blobs)?;
        let mut index = BTreeMap::new();
        for (name, value) in self.names.iter().zip(&self.values) {
            let file = format!("params/{name}.pdt");
            value.save(dir.join(&file))?;
            index.insert(
                name.clone(),
                IndexEntry {
                    file,
                    shape: value.shape().to_vec(),
                },
            );
        }
        fs::write(dir.join("params.json"), serde_json::to_string_pretty(&index)?)?;
        Ok(())
    }

    /// Loads values saved by [`ParamStore::save`] into an existing layout.
    ///
    /// Every parameter of `self` must be present with a matching shape.
    pub fn load_into(&mut self, dir: &Path) -> Result<()> {
        let text = fs::read_to_string(dir.join("params.json"))?;
        let index: BTreeMap<String, IndexEntry> = serde_json::from_str(&text)?;
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let entry = index
                .get(name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter {name}")))?;
            let t = Tensor::load(dir.join(&entry.file))?;
            if t.shape() != value.shape() {
                return Err(Error::Data(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    value.shape()
                )));
            }
            *value = t;
        }
        Ok(())
    }
}
