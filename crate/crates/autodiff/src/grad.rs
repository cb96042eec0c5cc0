use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tensor::Tensor;

/// Stable identifier of a trainable parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// A tensor owned outside the tape that may receive gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub id: ParamId,
    pub value: Tensor<S>,
    pub requires_grad: bool,
}

impl<S: Float> Param<S> {
    pub fn new(id: ParamId, value: Tensor<S>) -> Self {
        Self {
            id,
            value,
            requires_grad: true,
        }
    }

    pub fn frozen(id: ParamId, value: Tensor<S>) -> Self {
        Self {
            id,
            value,
            requires_grad: false,
        }
    }
}

/// Gradients keyed by parameter, iterated in ascending id order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientMap<S> {
    grads: BTreeMap<ParamId, Tensor<S>>,
}

impl<S: Float> GradientMap<S> {
    pub fn new() -> Self {
        Self {
            grads: BTreeMap::new(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.grads.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads.keys().copied()
    }

    /// Adds `g` into the entry for `id`, creating it if absent.
    pub fn accumulate(&mut self, id: ParamId, g: Tensor<S>) -> Result<()> {
        match self.grads.get_mut(&id) {
            Some(existing) => {
                if existing.shape() != g.shape() {
                    return Err(TensorError::Shape {
                        op: "gradient accumulate",
                        lhs: existing.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            None => {
                self.grads.insert(id, g);
            }
        }
        Ok(())
    }

    pub fn insert(&mut self, id: ParamId, g: Tensor<S>) {
        self.grads.insert(id, g);
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Tensor<S>> {
        self.grads.remove(&id)
    }

    /// Ensures every listed parameter has an entry, filling zeros.
    pub fn fill_missing<'a>(&mut self, params: impl IntoIterator<Item = &'a Param<S>>) {
        for p in params {
            if p.requires_grad {
                self.grads
                    .entry(p.id)
                    .or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
            }
        }
    }

    pub fn scale(&mut self, c: S) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.grads.values().map(Tensor::numel).sum()
    }

    /// Concatenation of every gradient in id order.
    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.numel());
        for g in self.grads.values() {
            out.extend_from_slice(g.data());
        }
        out
    }

    /// Flattens in the key order of `layout`, using zeros for keys absent here.
    pub fn flatten_like(&self, layout: &GradientMap<S>) -> Vec<S> {
        let mut out = Vec::with_capacity(layout.numel());
        for (id, shape_src) in layout.grads.iter() {
            match self.grads.get(id) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(S::zero(), shape_src.numel())),
            }
        }
        out
    }

    /// Inverse of [`GradientMap::flatten`] using this map's keys and shapes.
    pub fn unflatten(&self, flat: &[S]) -> Result<GradientMap<S>> {
        if flat.len() != self.numel() {
            return Err(TensorError::Length {
                op: "unflatten",
                shape: vec![self.numel()],
                len: flat.len(),
            });
        }
        let mut out = GradientMap::new();
        let mut offset = 0;
        for (id, g) in &self.grads {
            let n = g.numel();
            out.insert(
                *id,
                Tensor::new(g.shape().to_vec(), flat[offset..offset + n].to_vec())?,
            );
            offset += n;
        }
        Ok(out)
    }
}
