use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Real;

/// Name and shape of one tensor inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Flat parameter vector plus a layout table of contiguous named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    values: Vec<T>,
    layout: Vec<TensorSpec>,
    offsets: Vec<usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn zeros(layout: Vec<TensorSpec>) -> Result<Self> {
        let total = layout.iter().map(TensorSpec::numel).sum();
        Self::from_values(layout, vec![T::zero(); total])
    }

    pub fn from_values(layout: Vec<TensorSpec>, values: Vec<T>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(layout.len());
        let mut at = 0;
        for (i, spec) in layout.iter().enumerate() {
            if layout[..i].iter().any(|s| s.name == spec.name) {
                return Err(invalid(format!("duplicate tensor name `{}`", spec.name)));
            }
            offsets.push(at);
            at += spec.numel();
        }
        if at != values.len() {
            return Err(invalid(format!(
                "layout describes {at} elements but {} values were given",
                values.len()
            )));
        }
        Ok(Self {
            values,
            layout,
            offsets,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layout.iter().position(|s| s.name == name)
    }

    pub fn range(&self, index: usize) -> Range<usize> {
        let start = self.offsets[index];
        start..start + self.layout[index].numel()
    }

    pub fn range_of(&self, name: &str) -> Result<Range<usize>> {
        self.index_of(name)
            .map(|i| self.range(i))
            .ok_or_else(|| invalid(format!("unknown tensor `{name}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<&[T]> {
        Ok(&self.values[self.range_of(name)?])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut [T]> {
        let r = self.range_of(name)?;
        Ok(&mut self.values[r])
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<T>) -> Result<Self> {
        Self::from_values(self.layout.clone(), values)
    }
}
