//! Named parameter storage, gradient buffers, and the per-forward binding
//! that turns parameters into graph leaves.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::tensor::{Scalar, Tensor};

/// Index of a parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Arc<ArrayD<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    /// Weight tensor drawn from U(-b, b) with `b = sqrt(6 / fan_in)`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || T::lit(rng.gen_range(-bound..bound)));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, ArrayD::zeros(IxDyn(shape)))
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<ArrayD<T>> {
        Arc::clone(&self.values[id.0])
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn fill(&mut self, value: T) {
        for id in 0..self.values.len() {
            Arc::make_mut(&mut self.values[id]).fill(value);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| Arc::new(v.mapv(|x| U::from_f64(x.to_f64().unwrap()).unwrap())))
                .collect(),
        }
    }
}

/// Per-parameter gradient buffers; `None` for parameters that did not take
/// part in the graph.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub(crate) fn empty(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: ArrayD<T>) {
        match &mut self.grads[id.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// True when the parameter got no gradient or only exact zeros.
    pub fn is_zero(&self, id: ParamId) -> bool {
        self.get(id).is_none_or(|g| g.iter().all(|v| *v == T::zero()))
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Binds a store for one forward pass. With tracking on, each parameter
/// becomes a single graph leaf no matter how often it is used, so shared
/// layers accumulate gradient into one slot.
pub struct Binding<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    track: bool,
    leaves: RefCell<Vec<Option<Tensor<T>>>>,
}

impl<'a, T: Scalar> Binding<'a, T> {
    pub fn tracked(store: &'a ParamStore<T>) -> Self {
        Self::new(store, true)
    }

    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Self::new(store, false)
    }

    fn new(store: &'a ParamStore<T>, track: bool) -> Self {
        Self {
            store,
            track,
            leaves: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn get(&self, id: ParamId) -> Tensor<T> {
        let mut leaves = self.leaves.borrow_mut();
        leaves[id.0]
            .get_or_insert_with(|| {
                if self.track {
                    Tensor::param(self.store.shared(id), id)
                } else {
                    Tensor::shared_constant(self.store.shared(id))
                }
            })
            .clone()
    }

    /// Parameters that were bound at least once during this pass.
    pub fn touched(&self) -> Vec<ParamId> {
        self.leaves
            .borrow()
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_some())
            .map(|(i, _)| ParamId(i))
            .collect()
    }
}
