//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles. Nodes are
//! appended in execution order, so the tape is already topologically sorted
//! and [`Tape::backward`] is a single reverse sweep. Parameter leaves borrow
//! their values from a [`ParamStore`]; gradients come back as a separate
//! [`Gradients`] table so the store is never mutated while a tape is alive.

mod backward;
mod ops;

use std::borrow::Cow;
use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use crate::error::{bail, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

pub use ops::ConvSpec;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Param,
    Add { broadcast: bool },
    Sub,
    Mul,
    Scale(f64),
    MatMul { batch: usize, m: usize, k: usize, n: usize, shared_rhs: bool },
    Permute(Vec<usize>),
    Reshape,
    Concat { axis: usize, sizes: Vec<usize> },
    Sigmoid,
    Gelu,
    Relu,
    Softmax { axis: usize },
    LayerNorm { mean: Vec<f64>, rstd: Vec<f64> },
    Embedding { ids: Vec<usize> },
    CrossEntropy { targets: Vec<usize>, smoothing: f64, probs: Vec<f64> },
    SoftCrossEntropy { target: Vec<f64>, probs: Vec<f64> },
    Mse,
    Sum,
    Mean,
    Conv2d(ConvSpec),
    Dropout { mask: Vec<f64> },
}

pub(crate) struct Node<'a> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Cow<'a, [f64]>,
    pub(crate) op: Op,
    pub(crate) inputs: Vec<usize>,
    pub(crate) requires_grad: bool,
}

/// Records a computation for one forward/backward pass.
pub struct Tape<'a> {
    nodes: RefCell<Vec<Node<'a>>>,
    params: Option<&'a ParamStore>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
    dropout_seed: Option<u64>,
    dropout_calls: Cell<u64>,
    backward_done: Cell<bool>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    /// Evaluation-mode tape without a parameter store.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: None,
            param_nodes: RefCell::new(HashMap::new()),
            dropout_seed: None,
            dropout_calls: Cell::new(0),
            backward_done: Cell::new(false),
        }
    }

    /// Evaluation-mode tape reading parameters from `params`.
    pub fn with_params(params: &'a ParamStore) -> Self {
        Tape {
            params: Some(params),
            ..Tape::new()
        }
    }

    /// Training-mode tape: dropout is active and each dropout call draws its
    /// mask from a seed derived from `seed` and the call's ordinal.
    pub fn training(params: &'a ParamStore, seed: u64) -> Self {
        Tape {
            params: Some(params),
            dropout_seed: Some(seed),
            ..Tape::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_seed.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(
        &self,
        op: Op,
        inputs: Vec<usize>,
        shape: Vec<usize>,
        value: Vec<f64>,
    ) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            inputs,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Leaf that collects a gradient (used for inputs under test).
    pub fn input(&self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    fn leaf(&self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value: Cow::Owned(t.into_data()),
            op: Op::Leaf,
            inputs: vec![],
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(&n) = self.param_nodes.borrow().get(&id) {
            return Var(n);
        }
        let store = self
            .params
            .expect("Tape::param requires a tape built with a ParamStore");
        let p = store.get(id);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: p.value.shape().to_vec(),
            value: Cow::Borrowed(p.value.data()),
            op: Op::Param,
            inputs: vec![],
            requires_grad: p.trainable,
        });
        let n = nodes.len() - 1;
        self.param_nodes.borrow_mut().insert(id, n);
        Var(n)
    }

    /// Copy of `v` cut off from the graph (stop-gradient).
    pub fn detach(&self, v: Var) -> Var {
        let t = self.value(v);
        self.constant(t)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    /// Runs `f` on the raw values of `v` without copying.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        if n.value.len() != 1 {
            bail!(Contract, "expected a scalar, found shape {:?}", n.shape);
        }
        Ok(n.value[0])
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn next_dropout_seed(&self) -> Option<u64> {
        let base = self.dropout_seed?;
        let call = self.dropout_calls.get();
        self.dropout_calls.set(call + 1);
        Some(crate::rng::mix(base, call))
    }

    /// Reverse sweep from a scalar `loss`. A tape supports one sweep; call
    /// [`Tape::reset_grad`] before sweeping again.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.backward_done.get() {
            bail!(
                Contract,
                "backward already ran on this tape; call reset_grad first"
            );
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            bail!(
                Contract,
                "backward needs a scalar loss, found shape {:?}",
                root.shape
            );
        }
        self.backward_done.set(true);
        let grads = backward::sweep(&nodes, loss.0);
        let params = self
            .param_nodes
            .borrow()
            .iter()
            .map(|(&p, &n)| (p, n))
            .collect();
        Ok(Gradients { grads, params })
    }

    pub fn reset_grad(&self) {
        self.backward_done.set(false);
    }
}

/// Gradients produced by one reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` was reached.
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients for every trainable parameter that the loss depends on.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|&(p, n)| self.grads[n].as_deref().map(|g| (p, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|&&(p, _)| p == id)
            .and_then(|&(_, n)| self.grads[n].as_deref())
    }
}

/// Dense per-parameter gradient accumulator, indexed like a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradBuffer {
    pub grads: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradBuffer {
            grads: store.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    pub fn accumulate(&mut self, g: &Gradients, weight: f64) {
        for (id, grad) in g.params() {
            for (a, b) in self.grads[id].iter_mut().zip(grad) {
                *a += weight * b;
            }
        }
    }

    pub fn add(&mut self, other: &GradBuffer) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            for x in g.iter_mut() {
                *x *= c;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests;
