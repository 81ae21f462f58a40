use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn<T> = Box<dyn FnOnce(&[T], &mut GradSink<'_, T>)>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
    leaf: bool,
    backward: Option<BackwardFn<T>>,
}

/// Define-by-run tape for reverse-mode differentiation.
///
/// Every op appends one node; [`Graph::backward`] walks the nodes once in
/// reverse order. A graph can be differentiated only once: build a fresh one
/// for every forward pass.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
    check_finite: bool,
    first_non_finite: RefCell<Option<String>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            check_finite: cfg!(debug_assertions),
            first_non_finite: RefCell::new(None),
        }
    }

    /// Records the first op whose output contains NaN or infinity; the
    /// failure is reported by [`Graph::backward`] and [`Graph::check_finite`].
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false, None)
    }

    /// A leaf that collects a gradient, addressed by its [`Var`].
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true, None)
    }

    /// A trainable parameter; its gradient is routed back to `store` by
    /// [`ParamStore::accumulate`].
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push_leaf(store.value(id).clone(), true, Some(id))
    }

    /// Reads a parameter without recording it for differentiation.
    pub fn param_frozen(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push_leaf(store.value(id).clone(), false, None)
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), requires_grad, param, leaf: true, backward: None });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Appends an op output. `backward` receives the upstream gradient and
    /// must accumulate into the inputs through the sink; it is dropped when
    /// no input needs a gradient.
    pub(crate) fn push_op(
        &self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[Var],
        backward: impl FnOnce(&[T], &mut GradSink<'_, T>) + 'static,
    ) -> Var {
        if self.check_finite && !value.all_finite() {
            let mut first = self.first_non_finite.borrow_mut();
            if first.is_none() {
                *first = Some(op.to_string());
            }
        }
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        let backward: Option<BackwardFn<T>> =
            if requires_grad { Some(Box::new(backward)) } else { None };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), requires_grad, param: None, leaf: false, backward });
        Var(nodes.len() - 1)
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite.borrow().as_ref() {
            Some(op) => Err(Error::NumericFailure(format!("non-finite value produced by `{op}`"))),
            None => Ok(()),
        }
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed.replace(true) {
            return Err(Error::State("backward already ran on this graph; rebuild it with a new forward pass".into()));
        }
        self.check_finite()?;
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let requires: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
        let sizes: Vec<usize> = nodes.iter().map(|n| n.value.len()).collect();

        for i in (0..=loss.0).rev() {
            let Some(backward) = nodes[i].backward.take() else { continue };
            let Some(upstream) = grads[i].take() else { continue };
            let mut sink = GradSink { grads: &mut grads[..i], requires: &requires, sizes: &sizes };
            backward(&upstream, &mut sink);
        }

        let mut out = Gradients { by_node: Vec::new(), params: Vec::new() };
        for (i, node) in nodes.iter().enumerate() {
            if !node.requires_grad || !node.leaf {
                continue;
            }
            let g = grads[i].take().unwrap_or_else(|| vec![T::zero(); node.value.len()]);
            let g = Tensor::new(node.value.shape(), g)?;
            if let Some(p) = node.param {
                out.params.push((p, g.clone()));
            }
            out.by_node.push((Var(i), g));
        }
        Ok(out)
    }
}

/// Accumulator handed to backward closures.
pub struct GradSink<'a, T> {
    grads: &'a mut [Option<Vec<T>>],
    requires: &'a [bool],
    sizes: &'a [usize],
}

impl<T: Real> GradSink<'_, T> {
    /// Gradient buffer of `v`, or `None` when `v` does not need one.
    pub fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.requires[v.0] {
            return None;
        }
        let n = self.sizes[v.0];
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    pub fn add(&mut self, v: Var, g: &[T]) {
        if let Some(dst) = self.slot(v) {
            for (d, s) in dst.iter_mut().zip(g) {
                *d = *d + *s;
            }
        }
    }
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients<T> {
    by_node: Vec<(Var, Tensor<T>)>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.iter().find(|(n, _)| *n == v).map(|(_, g)| g)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(p, g)| (*p, g))
    }
}
