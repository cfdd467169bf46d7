//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! Every [`Var`] owns its value and the edges to the vars it was computed
//! from. Local derivatives are closures written in terms of the same
//! differentiable ops, so a gradient produced with `create_graph = true` is
//! itself a graph node and can be differentiated again. That second pass is
//! what lets a gradient-matching loss be backpropagated into synthetic data.
//!
//! Graphs are `Rc`-based and therefore confined to the thread that built
//! them. Parallel work builds one graph per thread from plain [`Tensor`]s.

mod conv;
mod linear;
mod ops;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

pub use conv::{conv2d, conv2d_input_grad, conv2d_weight_grad};
pub use linear::{linear_adjoint, linear_map, PlaneMap};
pub(crate) use linear::apply_forward;
pub use ops::*;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub(crate) type Backward<T> = Box<dyn Fn(&Var<T>, &[Var<T>]) -> Result<Vec<Var<T>>>>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static NO_GRAD_DEPTH: Cell<usize> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// True unless running inside [`no_grad`].
pub fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() == 0)
}

struct NoGradGuard;

impl NoGradGuard {
    fn enter() -> Self {
        NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
        NoGradGuard
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

/// Runs `f` without recording any graph edges.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = NoGradGuard::enter();
    f()
}

struct Node<T: Element> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<Backward<T>>,
}

/// A differentiable value: a tensor plus its place in the graph.
pub struct Var<T: Element>(Rc<Node<T>>);

impl<T: Element> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("requires_grad", &self.0.requires_grad)
            .field("value", &self.0.value)
            .finish()
    }
}

impl<T: Element> Var<T> {
    fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// A leaf that gradients are taken with respect to.
    pub fn param(value: Tensor<T>) -> Self {
        Self::leaf(value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    pub(crate) fn from_op(value: Tensor<T>, parents: Vec<Var<T>>, backward: Backward<T>) -> Self {
        let record = grad_enabled() && parents.iter().any(Var::requires_grad);
        if !record {
            return Self::constant(value);
        }
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            parents,
            backward: Some(backward),
        }))
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Creation order of this node; parents always have smaller ids.
    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// A constant copy cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    pub fn item(&self) -> T {
        self.0.value.item()
    }
}

/// Gradients of a scalar `loss` with respect to each var in `wrt`.
///
/// Vars that `loss` does not depend on get a zero tensor. With
/// `create_graph` the returned gradients are differentiable graph nodes;
/// otherwise they are constants and no graph is recorded while computing
/// them.
pub fn grad<T: Element>(loss: &Var<T>, wrt: &[Var<T>], create_graph: bool) -> Result<Vec<Var<T>>> {
    if loss.len() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    let _guard = (!create_graph).then(NoGradGuard::enter);

    let mut order = Vec::new();
    if loss.requires_grad() {
        let mut seen = HashSet::new();
        let mut stack = vec![loss.clone()];
        seen.insert(loss.id());
        while let Some(v) = stack.pop() {
            for p in &v.0.parents {
                if p.requires_grad() && seen.insert(p.id()) {
                    stack.push(p.clone());
                }
            }
            order.push(v);
        }
        order.sort_unstable_by_key(|v| std::cmp::Reverse(v.id()));
    }

    let mut grads: HashMap<u64, Var<T>> = HashMap::new();
    grads.insert(loss.id(), Var::constant(Tensor::ones(loss.shape().to_vec())));
    for node in &order {
        let Some(backward) = node.0.backward.as_ref() else {
            continue;
        };
        let Some(g) = grads.get(&node.id()).cloned() else {
            continue;
        };
        let parent_grads = backward(&g, &node.0.parents)?;
        debug_assert_eq!(parent_grads.len(), node.0.parents.len());
        for (p, pg) in node.0.parents.iter().zip(parent_grads) {
            if !p.requires_grad() {
                continue;
            }
            debug_assert_eq!(p.shape(), pg.shape());
            let acc = match grads.remove(&p.id()) {
                Some(prev) => add(&prev, &pg)?,
                None => pg,
            };
            grads.insert(p.id(), acc);
        }
    }

    Ok(wrt
        .iter()
        .map(|w| {
            grads
                .get(&w.id())
                .cloned()
                .unwrap_or_else(|| Var::constant(Tensor::zeros(w.shape().to_vec())))
        })
        .collect())
}
