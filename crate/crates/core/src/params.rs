//! Named parameter storage and its binding onto a tape.

use std::collections::BTreeMap;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{kaiming_normal, DenseTensor};

/// How a parameter tensor starts out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Square identity; only valid for `[n, n]` shapes.
    Identity,
    Kaiming { fan_in: usize },
}

/// Declared parameter: the path, shape and initializer, without storage.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamInfo {
    pub fn new(path: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            path: path.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn materialize(&self, rng: &mut RngState) -> Result<DenseTensor> {
        match self.init {
            Init::Zeros => DenseTensor::zeros(&self.shape),
            Init::Ones => DenseTensor::ones(&self.shape),
            Init::Identity => {
                if self.shape.len() != 2 || self.shape[0] != self.shape[1] {
                    return Err(Error::Build(format!(
                        "{}: identity init needs a square matrix, got {:?}",
                        self.path, self.shape
                    )));
                }
                DenseTensor::identity(self.shape[0])
            }
            Init::Kaiming { fan_in } => kaiming_normal(rng, &self.shape, fan_in),
        }
    }
}

/// Every trainable tensor of a model, keyed by `stage/block/layer/tensor` path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, DenseTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Materializes `infos` in order from one stream.
    pub fn from_infos(infos: &[ParamInfo], rng: &mut RngState) -> Result<Self> {
        let mut store = Self::new();
        for info in infos {
            store.insert(&info.path, info.materialize(rng)?)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, path: &str, value: DenseTensor) -> Result<()> {
        if self.tensors.contains_key(path) {
            return Err(Error::Build(format!("duplicate parameter path {path}")));
        }
        self.tensors.insert(path.to_string(), value);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&DenseTensor> {
        self.tensors
            .get(path)
            .ok_or_else(|| Error::Parameter(format!("no parameter at {path}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut DenseTensor> {
        self.tensors
            .get_mut(path)
            .ok_or_else(|| Error::Parameter(format!("no parameter at {path}")))
    }

    /// Replaces an existing tensor, keeping its shape.
    pub fn set(&mut self, path: &str, value: DenseTensor) -> Result<()> {
        let slot = self.get_mut(path)?;
        if slot.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "{path}: shape {:?} cannot replace {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, path: &str) -> bool {
        self.tensors.contains_key(path)
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseTensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DenseTensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(DenseTensor::len).sum()
    }
}

/// A tape plus lazy bindings from parameter paths to leaves.
///
/// A parameter is copied onto the tape the first time a layer asks for it, so
/// parameters untouched by a forward pass get no gradient at all.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'s> Graph<'s> {
    /// `trainable = false` records parameters as constants (evaluation).
    pub fn new(store: &'s ParamStore, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
            trainable,
        }
    }

    pub fn param(&mut self, path: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(path) {
            return Ok(v);
        }
        let value = self.store.get(path)?.clone();
        let v = if self.trainable {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.insert(path.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, value: DenseTensor) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &DenseTensor {
        self.tape.value(v)
    }

    /// Paths bound so far.
    pub fn bound_paths(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(String::as_str)
    }

    /// Backward from `loss`; returns gradients for every bound parameter.
    pub fn gradients(&self, loss: Var) -> Result<BTreeMap<String, DenseTensor>> {
        let mut grads = self.tape.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .filter_map(|(p, &v)| grads.take(v).map(|g| (p.clone(), g)))
            .collect())
    }
}
