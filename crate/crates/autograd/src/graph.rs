use std::borrow::Cow;

use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward rule of a recorded operation.
///
/// `inputs` are the forward inputs in recording order; the returned vector
/// holds one optional gradient per input, `None` where `wants[i]` is false.
pub(crate) trait Op<T: Real> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Leaf {
    Constant,
    Input,
    Param(ParamId),
}

struct Node<'p, T: Real> {
    value: Cow<'p, Tensor<T>>,
    inputs: Vec<usize>,
    op: Option<Box<dyn Op<T> + 'p>>,
    leaf: Option<Leaf>,
    requires_grad: bool,
}

/// Arithmetic mode of the matrix products recorded on a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    /// Full precision of the element type.
    #[default]
    High,
    /// Matrix-product operands rounded to bfloat16 in the forward pass.
    Mixed,
}

/// Tape recording a forward computation for reverse-mode differentiation.
///
/// Parameters are borrowed from a [`ParamStore`] rather than copied.
pub struct Graph<'p, T: Real> {
    nodes: Vec<Node<'p, T>>,
    params: Option<&'p ParamStore<T>>,
    grad_enabled: bool,
    train_params: bool,
    precision: Precision,
}

impl<'p, T: Real> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: None, grad_enabled: true, train_params: true, precision: Precision::High }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self { params: Some(params), ..Self::new() }
    }

    /// A graph that records no backward information (inference only).
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self { params: Some(params), grad_enabled: false, train_params: false, ..Self::new() }
    }

    pub fn set_precision(&mut self, precision: Precision) {
        self.precision = precision;
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Parameters read through [`Graph::param`] are treated as constants.
    pub fn freeze_params(&mut self) {
        self.train_params = false;
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(t), Leaf::Constant, false)
    }

    /// A differentiable leaf whose gradient is reported by [`Gradients::var`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let rg = self.grad_enabled;
        self.leaf(Cow::Owned(t), Leaf::Input, rg)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.params.expect("graph was built without a parameter store");
        let rg = self.grad_enabled && self.train_params;
        self.leaf(Cow::Borrowed(store.get(id)), Leaf::Param(id), rg)
    }

    fn leaf(&mut self, value: Cow<'p, Tensor<T>>, leaf: Leaf, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, inputs: Vec::new(), op: None, leaf: Some(leaf), requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Take ownership of a value (cloning when it is a borrowed parameter).
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Cow::Owned(Tensor::zeros(&[0]))).into_owned()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: impl Op<T> + 'p) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op: Option<Box<dyn Op<T> + 'p>> = if requires_grad { Some(Box::new(op)) } else { None };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            inputs: inputs.iter().map(|v| v.0).collect(),
            op,
            leaf: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let out = &self.nodes[loss.0].value;
        if out.len() != 1 {
            return Err(TensorError::shape("backward", "scalar loss", format!("{:?}", out.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<(ParamId, Tensor<T>)> = Vec::new();
        let mut input_grads: Vec<(usize, Tensor<T>)> = Vec::new();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { params: param_grads, inputs: input_grads });
        }
        grads[loss.0] = Some(Tensor::full(out.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match (&node.leaf, &node.op) {
                (Some(Leaf::Param(id)), _) => param_grads.push((*id, g)),
                (Some(Leaf::Input), _) => input_grads.push((idx, g)),
                (Some(Leaf::Constant), _) => {}
                (None, Some(op)) => {
                    let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &*self.nodes[i].value).collect();
                    let wants: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
                    let input_grads = op.backward(&inputs, &node.value, &g, &wants)?;
                    for ((&i, gi), want) in node.inputs.iter().zip(input_grads).zip(wants) {
                        let Some(gi) = gi else { continue };
                        if !want {
                            continue;
                        }
                        match &mut grads[i] {
                            Some(acc) => acc.add_assign(&gi),
                            slot => *slot = Some(gi),
                        }
                    }
                }
                (None, None) => {}
            }
        }
        Ok(Gradients { params: param_grads, inputs: input_grads })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients<T: Real> {
    params: Vec<(ParamId, Tensor<T>)>,
    inputs: Vec<(usize, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a parameter, summed over every read of it.
    pub fn param(&self, id: ParamId) -> Option<Tensor<T>> {
        let mut acc: Option<Tensor<T>> = None;
        for (pid, g) in &self.params {
            if *pid == id {
                match &mut acc {
                    Some(a) => a.add_assign(g),
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }

    pub fn var(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.iter().find(|(i, _)| *i == v.0).map(|(_, g)| g)
    }

    /// Dense per-parameter gradients aligned with `store`, zeros where a
    /// parameter was not reached.
    pub fn dense(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        let mut out: Vec<Option<Tensor<T>>> = (0..store.len()).map(|_| None).collect();
        for (id, g) in &self.params {
            match &mut out[*id] {
                Some(a) => a.add_assign(g),
                slot => *slot = Some(g.clone()),
            }
        }
        out.into_iter()
            .enumerate()
            .map(|(i, g)| g.unwrap_or_else(|| Tensor::zeros(store.get(i).shape())))
            .collect()
    }

    /// Ids of parameters that received a gradient.
    pub fn touched(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.params.iter().map(|(id, _)| *id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}
