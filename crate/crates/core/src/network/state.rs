//! Named parameter storage shared by student and teacher.

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Inference statistics (normalization running averages); never receives gradients.
    Buffer,
}

impl ParamKind {
    pub fn from_name(name: &str) -> Self {
        if name.ends_with(".running_mean") || name.ends_with(".running_var") {
            ParamKind::Buffer
        } else {
            ParamKind::Trainable
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T> ParamEntry<T> {
    pub fn kind(&self) -> ParamKind {
        ParamKind::from_name(&self.name)
    }
}

/// Ordered collection of named parameter arrays for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ModelState<T> {
    pub fn new(entries: Vec<ParamEntry<T>>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::StateMismatch(format!(
                    "duplicate parameter `{}`",
                    e.name
                )));
            }
            if e.shape.iter().product::<usize>() != e.data.len() {
                return Err(Error::StateMismatch(format!(
                    "parameter `{}` has shape {:?} but {} values",
                    e.name,
                    e.shape,
                    e.data.len()
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub(crate) fn data(&self, index: usize) -> &[T] {
        &self.entries[index].data
    }

    pub(crate) fn data_mut(&mut self, index: usize) -> &mut [T] {
        &mut self.entries[index].data
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data: e
                        .data
                        .iter()
                        .map(|v| U::from_f64_lossy(v.as_f64()))
                        .collect(),
                })
                .collect(),
        }
    }

    /// Same names, shapes and ordering.
    pub fn check_same_structure<U>(&self, other: &ModelState<U>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::StateMismatch(format!(
                "{} vs {} parameters",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::StateMismatch(format!(
                    "`{}` {:?} vs `{}` {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    /// Largest absolute elementwise difference between two states.
    pub fn max_abs_diff(&self, other: &ModelState<T>) -> Result<f64> {
        self.check_same_structure(other)?;
        Ok(self
            .entries
            .iter()
            .zip(&other.entries)
            .flat_map(|(a, b)| {
                a.data
                    .iter()
                    .zip(&b.data)
                    .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
            })
            .fold(0.0, f64::max))
    }
}

/// Per-parameter gradient buffers aligned with a [`ModelState`]; buffers get empty vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    grads: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(state: &ModelState<T>) -> Self {
        Self {
            grads: state
                .entries()
                .iter()
                .map(|e| match e.kind() {
                    ParamKind::Trainable => vec![T::zero(); e.data.len()],
                    ParamKind::Buffer => Vec::new(),
                })
                .collect(),
        }
    }

    pub fn get(&self, index: usize) -> &[T] {
        &self.grads[index]
    }

    pub(crate) fn get_mut(&mut self, index: usize) -> &mut [T] {
        &mut self.grads[index]
    }

    pub(crate) fn add(&mut self, index: usize, values: &[T]) {
        self.grads[index]
            .iter_mut()
            .zip(values)
            .for_each(|(g, &v)| *g += v);
    }

    pub fn iter(&self) -> impl Iterator<Item = &[T]> {
        self.grads.iter().map(|g| g.as_slice())
    }

    pub fn add_scaled(&mut self, other: &Gradients<T>, factor: T) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.iter_mut().zip(b).for_each(|(x, &y)| *x += factor * y);
        }
    }

    pub fn scale(&mut self, factor: T) {
        self.grads.iter_mut().flatten().for_each(|g| *g *= factor);
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }
}
