//! Named parameter storage and per-pass graph binding.
//!
//! All trainable state lives in a [`ParamStore`] keyed by dotted names
//! (`gA.enc.0.w`, `dB.local.2.w`, `proj.t2.mlp1.w`, ...). A forward pass
//! binds the store into a fresh graph via [`Binding`], marking the subset
//! selected by a [`ParamScope`] as trainable.

use std::rc::Rc;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Gradients, Graph, Tensor};

/// Ordered name -> array map. Insertion order is fixed by network
/// construction, which keeps optimizer traversal deterministic.
pub struct ParamStore<T: Scalar> {
    entries: IndexMap<String, Rc<ArrayD<T>>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), Rc::new(value));
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Rc<ArrayD<T>>> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Rc<ArrayD<T>>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total element count over all parameters.
    pub fn element_count(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }

    /// In-place update of one parameter. Clones only if a graph still
    /// holds the old value.
    pub fn update(&mut self, name: &str, f: impl FnOnce(&mut ArrayD<T>)) {
        let entry = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        f(Rc::make_mut(entry));
    }

    pub fn set(&mut self, name: &str, value: ArrayD<T>) {
        let entry = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(entry.shape(), value.shape(), "set: shape mismatch for {name}");
        *entry = Rc::new(value);
    }
}

/// Prefix-based parameter filter.
#[derive(Debug, Clone)]
pub struct ParamScope {
    prefixes: Vec<String>,
}

impl ParamScope {
    pub fn new(prefixes: impl IntoIterator<Item = impl Into<String>>) -> Self {
        ParamScope {
            prefixes: prefixes.into_iter().map(Into::into).collect(),
        }
    }

    /// Everything in the store.
    pub fn all() -> Self {
        ParamScope {
            prefixes: vec![String::new()],
        }
    }

    /// Both generators, excluding projection heads and discriminators.
    pub fn generators() -> Self {
        ParamScope::new(["gA.", "gB."])
    }

    /// Generator-side trainables for the optimizer: generators plus
    /// contrastive projection heads.
    pub fn generator_update() -> Self {
        ParamScope::new(["gA.", "gB.", "proj."])
    }

    pub fn discriminator(tag: &str) -> Self {
        ParamScope::new([format!("{tag}.")])
    }

    pub fn matches(&self, name: &str) -> bool {
        self.prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Names in `store` selected by this scope, in store order.
    pub fn select<'a, T: Scalar>(&self, store: &'a ParamStore<T>) -> Vec<&'a str> {
        store.names().filter(|n| self.matches(n)).collect()
    }

    /// Errors when the scope selects nothing (misconfigured filter).
    pub fn select_nonempty<'a, T: Scalar>(
        &self,
        store: &'a ParamStore<T>,
    ) -> Result<Vec<&'a str>> {
        let names = self.select(store);
        if names.is_empty() {
            return Err(Error::invalid(
                "param scope",
                format!("prefixes {:?} match no parameters", self.prefixes),
            ));
        }
        Ok(names)
    }
}

/// Store parameters bound into one graph.
pub struct Binding<T: Scalar> {
    map: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Binding<T> {
    /// Binds every parameter; those matched by `trainable` require grad.
    pub fn bind(graph: &Graph<T>, store: &ParamStore<T>, trainable: &ParamScope) -> Self {
        let mut map = IndexMap::with_capacity(store.len());
        for (name, value) in store.iter() {
            let t = graph.leaf_shared(Rc::clone(value), trainable.matches(name));
            map.insert(name.to_string(), t);
        }
        Binding { map }
    }

    /// Binds everything frozen (inference).
    pub fn bind_frozen(graph: &Graph<T>, store: &ParamStore<T>) -> Self {
        Self::bind(graph, store, &ParamScope::new(Vec::<String>::new()))
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Extracts accumulated gradients for trainable bound parameters.
    /// Parameters without a gradient (unused in the loss) get zeros.
    pub fn grads(&self, grads: &mut Gradients<T>, scope: &ParamScope) -> IndexMap<String, ArrayD<T>> {
        let mut out = IndexMap::new();
        for (name, tensor) in &self.map {
            if !scope.matches(name) {
                continue;
            }
            let g = grads
                .take(tensor)
                .unwrap_or_else(|| ArrayD::zeros(IxDyn(&tensor.shape())));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Zero-mean normal init used for all conv/MLP weights.
pub fn normal_init<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ArrayD<T> {
    let dist = Normal::new(0.0, std).expect("std must be positive");
    let data: Vec<T> = (0..shape.iter().product::<usize>())
        .map(|_| T::from_f64(dist.sample(rng)))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn zeros_init<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

/// Uniform values in `[lo, hi)`, used by tests for generic inputs.
pub fn uniform<T: Scalar>(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> ArrayD<T> {
    let data: Vec<T> = (0..shape.iter().product::<usize>())
        .map(|_| T::from_f64(rng.random_range(lo..hi)))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}
