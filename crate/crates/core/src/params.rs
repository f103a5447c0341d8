//! Named parameter registry and its binding onto a tape.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors. Registration order is stable and
/// defines both the file manifest order and the tape binding order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

/// One manifest entry of a serialized parameter directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id(name).map(|id| &mut self.tensors[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(Error::shape("param set", self.tensors[id.0].shape(), value.shape()));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// Records every parameter as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_with(tape, true)
    }

    /// Records every parameter as a constant leaf.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), requires_grad))
                .collect(),
        }
    }

    /// Gradients of all bound parameters after `tape.backward`, zeros where
    /// a parameter did not influence the loss.
    pub fn gradients(&self, tape: &Tape<T>, bound: &Bound) -> Vec<Tensor<T>> {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, &v)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// Writes `manifest.json` plus one SMT1 file per tensor under `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        let tensor_dir = dir.join("tensors");
        fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;
        let mut manifest = Vec::with_capacity(self.len());
        for (i, (name, t)) in self.names.iter().zip(&self.tensors).enumerate() {
            let file = format!("tensors/{i:05}.smt");
            format::write(&dir.join(&file), t)?;
            manifest.push(ManifestEntry {
                name: name.clone(),
                file,
                shape: t.shape().to_vec(),
            });
        }
        crate::json::write_canonical(&dir.join("manifest.json"), &manifest)
    }

    /// Reads a directory written by [`ParamStore::save_dir`].
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let manifest: Vec<ManifestEntry> = crate::json::read(&dir.join("manifest.json"))?;
        let mut store = ParamStore::new();
        for entry in manifest {
            if store.index.contains_key(&entry.name) {
                return Err(Error::Format {
                    path: dir.join("manifest.json"),
                    offset: 0,
                    msg: format!("duplicate parameter {}", entry.name),
                });
            }
            let path = dir.join(&entry.file);
            let t: Tensor<T> = format::read(&path)?;
            if t.shape() != entry.shape {
                return Err(Error::Format {
                    path,
                    offset: 6,
                    msg: format!("shape {:?} disagrees with manifest {:?}", t.shape(), entry.shape),
                });
            }
            store.insert(entry.name, t);
        }
        Ok(store)
    }

    /// Copies values from `other`, requiring identical names and shapes.
    pub fn assign_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Contract("parameter name lists differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::shape("assign_from", dst.shape(), src.shape()));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Points one parameter at another tape variable.
    pub fn replace(&mut self, id: ParamId, v: Var) {
        self.vars[id.0] = v;
    }
}

/// Registers parameters under a dotted name prefix, drawing initial values
/// from `rng` in registration order.
pub struct ParamInit<'a, T: Scalar, R: Rng> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Scalar, R: Rng> ParamInit<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        ParamInit {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Child initializer with `name` appended to the prefix.
    pub fn scope(&mut self, name: &str) -> ParamInit<'_, T, R> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamInit {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Uniform on `±√(1/fan_in)`.
    pub fn fan_in_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor::uniform(shape, -bound, bound, self.rng);
        let full = self.full_name(name);
        self.store.insert(full, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let full = self.full_name(name);
        self.store.insert(full, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let full = self.full_name(name);
        self.store.insert(full, Tensor::ones(shape))
    }
}
