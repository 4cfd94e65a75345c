//! Named parameter storage shared by the backbone and the transition adapter.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Whether decoupled weight decay applies (matrices yes, gains/biases no).
    pub decay: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, tensor, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), tensor: e.tensor.cast(), decay: e.decay })
                .collect(),
        }
    }

    /// All parameter values concatenated in registration order.
    pub fn flatten(&self) -> Vec<T> {
        self.entries.iter().flat_map(|e| e.tensor.data().iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(Error::Shape(format!(
                "flat vector of {} values for {} parameters",
                flat.len(),
                self.scalar_count()
            )));
        }
        let mut off = 0;
        for e in &mut self.entries {
            let n = e.tensor.len();
            e.tensor.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Maps a flat coordinate back to `(parameter name, offset)`.
    pub fn locate(&self, mut flat_index: usize) -> Option<(&str, usize)> {
        for e in &self.entries {
            if flat_index < e.tensor.len() {
                return Some((&e.name, flat_index));
            }
            flat_index -= e.tensor.len();
        }
        None
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Overwrites every value with a draw from `N(0, std^2)`; used by tests to
    /// move away from structured initializations.
    pub fn randomize<R: Rng>(&mut self, rng: &mut R, std: f64) {
        let normal = Normal::new(0.0, std).expect("valid std");
        for e in &mut self.entries {
            for v in e.tensor.data_mut() {
                *v = T::of(normal.sample(rng));
            }
        }
    }
}

/// Tensor filled with `N(0, std^2)` samples.
pub fn normal_tensor<T: Real, R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, std).expect("valid std");
    let data = (0..n).map(|_| T::of(normal.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

pub fn const_tensor<T: Real>(shape: Vec<usize>, value: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, vec![T::of(value); n]).expect("shape matches")
}
