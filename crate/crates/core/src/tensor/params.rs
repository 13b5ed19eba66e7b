use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Role of a parameter inside the model.
///
/// The tag decides which parameters the sharpness probe differentiates
/// twice: only [`ParamKind::Dense`] (feed-forward weight matrices).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    /// Feed-forward (MLP) weight matrix.
    Dense,
    /// Attention query/key/value/output projection matrix.
    Attention,
    /// Token or position embedding table.
    Embedding,
    /// Layer-norm gain or shift.
    Norm,
    Bias,
    /// Final vocabulary projection.
    Head,
}

#[derive(Clone, Debug, PartialEq)]
struct Entry<T> {
    kind: ParamKind,
    value: Tensor<T>,
}

/// Named model parameters, each with an immutable [`ParamKind`] tag.
///
/// Iteration order is the lexicographic order of the names.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T = f32> {
    entries: BTreeMap<String, Entry<T>>,
}

impl<T: Scalar> Default for ParameterSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            entries: BTreeMap::new(),
        }
    }

    /// Adds a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(name, Entry { kind, value });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.value)
    }

    /// Mutable access to the values; tags cannot be changed.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|e| e.kind)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamKind, &Tensor<T>)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e.kind, &e.value))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, e)| (n.as_str(), &mut e.value))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Names carrying the given tag.
    pub fn names_of_kind(&self, kind: ParamKind) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.kind == kind)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(n, e)| {
                    (
                        n.clone(),
                        Entry {
                            kind: e.kind,
                            value: e.value.cast(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Returns a copy with `alpha * dir` added to every parameter named in `dir`.
    pub fn perturbed(&self, dir: &GradientSet<T>, alpha: T) -> Result<Self> {
        let mut out = self.clone();
        for (name, d) in dir.iter() {
            let p = out
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("direction names unknown parameter {name:?}")))?;
            if !p.same_shape(d) {
                return Err(Error::Contract(format!(
                    "direction {name:?} has shape {:?}, parameter has {:?}",
                    d.shape(),
                    p.shape()
                )));
            }
            for (x, &v) in p.data_mut().iter_mut().zip(d.data()) {
                *x = *x + alpha * v;
            }
        }
        Ok(out)
    }
}

/// Per-parameter tensors mirroring (a subset of) a [`ParameterSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<T = f32> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for GradientSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradientSet<T> {
    pub fn new() -> Self {
        GradientSet { grads: BTreeMap::new() }
    }

    /// All-zero set with the key set and shapes of `params`.
    pub fn zeros_like(params: &ParameterSet<T>) -> Self {
        GradientSet {
            grads: params
                .iter()
                .map(|(n, _, t)| (n.to_string(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.grads.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.grads.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.grads.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.grads.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Euclidean norm over every entry, accumulated in f64.
    pub fn norm(&self) -> f64 {
        self.grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: T) {
        for t in self.grads.values_mut() {
            for x in t.data_mut() {
                *x = *x * c;
            }
        }
    }

    /// True when keys and shapes exactly mirror `params`.
    pub fn mirrors(&self, params: &ParameterSet<T>) -> bool {
        self.grads.len() == params.len()
            && params
                .iter()
                .all(|(n, _, p)| self.grads.get(n).is_some_and(|g| g.same_shape(p)))
    }

    /// Concatenates the named entries in the given order.
    pub fn flatten(&self, names: &[String]) -> Result<Vec<T>> {
        let mut out = Vec::new();
        for n in names {
            let t = self
                .grads
                .get(n)
                .ok_or_else(|| Error::Contract(format!("gradient set has no entry {n:?}")))?;
            out.extend_from_slice(t.data());
        }
        Ok(out)
    }

    /// Inverse of [`GradientSet::flatten`], taking shapes from `params`.
    pub fn unflatten(flat: &[T], names: &[String], params: &ParameterSet<T>) -> Result<Self> {
        let mut out = GradientSet::new();
        let mut off = 0;
        for n in names {
            let p = params
                .get(n)
                .ok_or_else(|| Error::Contract(format!("unknown parameter {n:?}")))?;
            let end = off + p.len();
            if end > flat.len() {
                return Err(Error::Contract("flat vector too short".into()));
            }
            out.insert(n.clone(), Tensor::new(p.shape().to_vec(), flat[off..end].to_vec())?);
            off = end;
        }
        if off != flat.len() {
            return Err(Error::Contract("flat vector too long".into()));
        }
        Ok(out)
    }
}
