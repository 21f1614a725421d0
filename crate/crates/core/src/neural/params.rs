//! Named parameter tensors and their gradients.

use std::collections::HashMap;

use super::scalar::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub frozen: bool,
}

impl<T: Real> Param<T> {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Ordered parameter container; ids are stable for the life of the store and
/// names are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<T>) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "{name}: shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter {name}"
            )));
        }
        let id = self.params.len();
        self.index.insert(name.to_string(), id);
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            frozen: false,
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Missing(format!("parameter {name}")))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    #[inline]
    pub fn data(&self, id: ParamId) -> &[T] {
        &self.params[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].data
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.data.len())
            .sum()
    }

    /// Sets `frozen = freeze(name)` on every parameter.
    pub fn set_frozen_by(&mut self, freeze: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.frozen = freeze(&p.name);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.data.iter().all(|x| x.is_finite()))
    }

    /// Copies values (not freeze flags) from a store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Shape("parameter stores differ in length".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(Error::Shape(format!(
                    "{} does not match {}",
                    dst.name, src.name
                )));
            }
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }

    /// Converts every tensor to another element type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&x| U::of(x.f64())).collect(),
                    frozen: p.frozen,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`]. Frozen parameters get no
/// buffer, so nothing can accumulate into them.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    data: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Grads {
            data: store
                .params
                .iter()
                .map(|p| (!p.frozen).then(|| vec![T::zero(); p.data.len()]))
                .collect(),
        }
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut [T]> {
        self.data[id.0].as_deref_mut()
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.data[id.0].as_deref()
    }

    pub fn zero(&mut self) {
        for g in self.data.iter_mut().flatten() {
            g.fill(T::zero());
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.data.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| x.f64() * x.f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data
            .iter()
            .flatten()
            .all(|g| g.iter().all(|x| x.is_finite()))
    }
}
