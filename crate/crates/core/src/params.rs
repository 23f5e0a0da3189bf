//! Named, ordered parameter storage.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// An ordered collection of named tensors. Order is insertion order and is
/// what [`crate::Tape::bind`] and the optimiser rely on.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid("parameter name", alloc::format!("duplicate {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces every tensor with the same-named one from `other`, checking shapes.
    pub fn load_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = other
                .by_name(name)
                .ok_or_else(|| Error::invalid("parameter set", alloc::format!("missing {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::shape("load parameters", t.shape(), src.shape()));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

/// Parameter vars bound on a tape, addressable by [`ParamId`].
#[derive(Clone, Copy, Debug)]
pub struct Bound<'a> {
    vars: &'a [crate::autodiff::Var],
}

impl<'a> Bound<'a> {
    pub fn new(vars: &'a [crate::autodiff::Var]) -> Self {
        Bound { vars }
    }

    pub fn get(&self, id: ParamId) -> crate::autodiff::Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &'a [crate::autodiff::Var] {
        self.vars
    }
}

/// Adds a tensor to `params` under `prefix.name`.
pub(crate) fn add_named<T: Real>(params: &mut ParamSet<T>, prefix: &str, name: &str, t: Tensor<T>) -> Result<ParamId> {
    params.add(alloc::format!("{prefix}.{name}"), t)
}

/// Looks up `prefix.name` and checks its shape.
pub(crate) fn find_named<T: Real>(params: &ParamSet<T>, prefix: &str, name: &str, shape: &[usize]) -> Result<ParamId> {
    let full = alloc::format!("{prefix}.{name}");
    let id = params
        .id(&full)
        .ok_or_else(|| Error::invalid("parameter set", alloc::format!("missing {full}")))?;
    if params.get(id).shape() != shape {
        return Err(Error::shape("parameter", params.get(id).shape(), shape));
    }
    Ok(id)
}
