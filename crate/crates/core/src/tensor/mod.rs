//! Tape-based reverse-mode autodiff over `ndarray`.
//!
//! A [`Graph`] records one forward pass; [`Tensor`] handles are cheap
//! indices into it. Ops append nodes in topological order, so the backward
//! sweep is a single reverse walk. Values are immutable once created and
//! shared into backward closures via `Rc`, which keeps the engine free of
//! interior aliasing while closures run.
//!
//! The engine is deliberately single-sample (no batch axis): the training
//! recipe uses batch size 1 throughout, and the few places that need more
//! than one example (discriminator patches) run separate passes.

mod conv;
mod deform;
pub mod gradcheck;
mod ops;

pub use conv::{Conv2dSpec, ConvTranspose2dSpec};
pub use deform::{constant_offsets, deform_conv2d, naive_conv2d_same, DeformSpec};
pub use ops::{broadcast_shapes, concat_flat, l2_normalize_rows, logsumexp, reduce_to_shape, softmax};


use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use crate::scalar::Scalar;

/// Gradient function: receives dL/d(output), returns dL/d(parent) for each
/// parent in order, shaped exactly like the parent values.
type BackwardFn<T> = Box<dyn Fn(&ArrayD<T>) -> Vec<ArrayD<T>>>;

struct Node<T: Scalar> {
    value: Rc<ArrayD<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

#[derive(Default)]
struct GraphInner<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// One recorded forward pass. Clones share the same tape.
pub struct Graph<T: Scalar> {
    inner: Rc<GraphInner<T>>,
}

impl<T: Scalar> Clone for Graph<T> {
    fn clone(&self) -> Self {
        Graph {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(GraphInner {
                nodes: RefCell::new(Vec::new()),
            }),
        }
    }

    fn push(
        &self,
        value: ArrayD<T>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Tensor<T> {
        let mut nodes = self.inner.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            requires_grad,
        });
        Tensor {
            graph: self.clone(),
            id,
        }
    }

    /// Leaf that participates in gradient computation.
    pub fn leaf(&self, value: ArrayD<T>, requires_grad: bool) -> Tensor<T> {
        self.push(value, Vec::new(), None, requires_grad)
    }

    /// Leaf sharing an existing value allocation (no copy).
    pub fn leaf_shared(&self, value: Rc<ArrayD<T>>, requires_grad: bool) -> Tensor<T> {
        let mut nodes = self.inner.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Tensor {
            graph: self.clone(),
            id,
        }
    }

    /// Leaf excluded from gradient computation.
    pub fn constant(&self, value: ArrayD<T>) -> Tensor<T> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, v: T) -> Tensor<T> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor<T> {
        self.constant(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_graph(&self, other: &Graph<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node of a [`Graph`].
pub struct Tensor<T: Scalar> {
    graph: Graph<T>,
    id: usize,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            graph: self.graph.clone(),
            id: self.id,
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Shared handle to the value array.
    pub fn value(&self) -> Rc<ArrayD<T>> {
        Rc::clone(&self.graph.inner.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.nodes.borrow()[self.id]
            .value
            .shape()
            .to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on tensor with {} elements", v.len());
        *v.iter().next().unwrap()
    }

    /// Re-enters the value as a constant leaf, cutting gradient flow.
    pub fn detach(&self) -> Tensor<T> {
        let v = self.value();
        self.graph.constant((*v).clone())
    }

    pub(crate) fn binary(
        &self,
        other: &Tensor<T>,
        value: ArrayD<T>,
        backward: Option<BackwardFn<T>>,
    ) -> Tensor<T> {
        assert!(
            self.graph.same_graph(&other.graph),
            "tensors belong to different graphs"
        );
        let requires = self.requires_grad() || other.requires_grad();
        self.graph.push(
            value,
            vec![self.id, other.id],
            if requires { backward } else { None },
            requires,
        )
    }

    pub(crate) fn unary(&self, value: ArrayD<T>, backward: Option<BackwardFn<T>>) -> Tensor<T> {
        let requires = self.requires_grad();
        self.graph.push(
            value,
            vec![self.id],
            if requires { backward } else { None },
            requires,
        )
    }

    pub(crate) fn nary(
        graph: &Graph<T>,
        parents: &[&Tensor<T>],
        value: ArrayD<T>,
        backward: Option<BackwardFn<T>>,
    ) -> Tensor<T> {
        let requires = parents.iter().any(|p| {
            assert!(
                graph.same_graph(&p.graph),
                "tensors belong to different graphs"
            );
            p.requires_grad()
        });
        graph.push(
            value,
            parents.iter().map(|p| p.id).collect(),
            if requires { backward } else { None },
            requires,
        )
    }

    /// Reverse sweep from a scalar output. Returns gradients for leaf
    /// tensors; intermediate gradients are dropped as soon as consumed.
    pub fn backward(&self) -> Gradients<T> {
        let nodes = self.graph.inner.nodes.borrow();
        let root = &nodes[self.id];
        assert_eq!(
            root.value.len(),
            1,
            "backward() from non-scalar tensor with shape {:?}",
            root.value.shape()
        );
        let mut grads: Vec<Option<ArrayD<T>>> = Vec::with_capacity(self.id + 1);
        grads.resize_with(self.id + 1, || None);
        grads[self.id] = Some(ArrayD::from_elem(root.value.raw_dim(), T::one()));

        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (pid, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[*pid].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    pg.shape(),
                    nodes[*pid].value.shape(),
                    "backward produced wrong shape for parent"
                );
                match &mut grads[*pid] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Output of [`Tensor::backward`]. Holds gradients for leaves only.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&ArrayD<T>> {
        self.grads.get(t.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, t: &Tensor<T>) -> Option<ArrayD<T>> {
        self.grads.get_mut(t.id).and_then(|g| g.take())
    }
}
