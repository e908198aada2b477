//! Reverse-mode differentiation over a recorded tape of primitive applications.
//!
//! A [`Tape`] owns every value produced while it is alive. Nodes are appended
//! in evaluation order, so the node list is already a topological order and
//! [`Tape::backward`] is a single reverse sweep. Gradients from fan-out are
//! summed in node order, which keeps results bit-identical across runs.

mod gradcheck;
pub(crate) mod kernels;
mod primitive;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use primitive::{arctan_surrogate, arctan_surrogate_grad, Attrs, Primitive};

use primitive::Saved;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How spiking nonlinearities evaluate their forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SpikeMode {
    /// Binary spikes; the surrogate only shapes the backward pass.
    #[default]
    Heaviside,
    /// The smooth surrogate replaces the step in the forward pass too, and
    /// reset paths stay attached. Used for finite-difference checks.
    SurrogateForward,
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Option<Primitive>,
    saved: Saved,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    spike_mode: SpikeMode,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_spike_mode(mode: SpikeMode) -> Self {
        Self { nodes: Vec::new(), spike_mode: mode }
    }

    pub fn spike_mode(&self) -> SpikeMode {
        self.spike_mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it participates in differentiation if the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, mut value: Tensor) -> Var {
        let requires_grad = value.requires_grad();
        value.clear_grad();
        self.push(Node { value, inputs: Vec::new(), op: None, saved: Saved::Nothing, requires_grad })
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    /// A constant copy of `v`, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    /// Batch statistics `(mean, biased variance)` computed by a training-mode
    /// batchnorm node.
    pub fn norm_stats(&self, v: Var) -> Option<(&[f32], &[f32])> {
        match &self.nodes[v.0].saved {
            Saved::Norm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    pub fn apply(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, saved) = primitive::forward(&op, &values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Node { value, inputs: inputs.to_vec(), op: Some(op), saved, requires_grad }))
    }

    /// Applies a catalog primitive looked up by name.
    pub fn apply_named(&mut self, name: &str, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        let op = Primitive::from_name(name, attrs)?;
        self.apply(op, inputs)
    }

    /// Populates `grad` on every leaf that requires it and is reachable from
    /// `root`. Seeds `d root / d root = 1`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = &self.nodes[root.0];
        if rv.value.numel() != 1 {
            return Err(Error::Backward(format!(
                "root must be scalar, got shape {:?}",
                rv.value.shape()
            )));
        }
        if !rv.requires_grad {
            return Err(Error::Backward("root is detached from every differentiable leaf".into()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let Some(op) = &node.op else {
                grads[i] = Some(g);
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let values: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = primitive::backward(op, &values, &node.value, &node.saved, &g, &needs)?;
            for (v, gi) in node.inputs.iter().zip(input_grads) {
                let Some(gi) = gi else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        for (i, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if node.op.is_none() && node.requires_grad {
                if let Some(g) = g {
                    node.value.set_grad(g)?;
                }
            }
        }
        Ok(())
    }

    // Convenience wrappers over `apply`.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Subtract, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::HadamardMultiply, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        self.apply(Primitive::ScalarScale { factor }, &[a])
    }

    /// `a + c` for a scalar constant `c`.
    pub fn add_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        let c = self.constant(Tensor::scalar(c));
        self.add(a, c)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Matmul, &[a, b])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        match b {
            Some(b) => self.apply(Primitive::Linear, &[x, w, b]),
            None => self.apply(Primitive::Linear, &[x, w]),
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, padding: usize) -> Result<Var> {
        let op = Primitive::Conv2d { padding };
        match b {
            Some(b) => self.apply(op, &[x, w, b]),
            None => self.apply(op, &[x, w]),
        }
    }

    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::MaxPool2d, &[x])
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: Var,
        running_var: Var,
        train: bool,
        eps: f32,
    ) -> Result<Var> {
        self.apply(Primitive::BatchNorm { train, eps }, &[x, gamma, beta, running_mean, running_var])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        self.apply(Primitive::Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.apply(Primitive::PermuteAxes { perm: perm.to_vec() }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        self.apply(Primitive::Concat { axis }, xs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Primitive::Slice { axis, start, end }, &[x])
    }

    pub fn sum(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.apply(Primitive::Sum { axes: axes.to_vec(), keepdim }, &[x])
    }

    /// Sum over every axis, giving a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum(x, &axes, false)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.apply(Primitive::Mean { axes: axes.to_vec(), keepdim }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[x])
    }

    pub fn grouped_contraction(&mut self, x: Var, w: Var) -> Result<Var> {
        self.apply(Primitive::GroupedContraction, &[x, w])
    }

    /// Spike emission at threshold `v_th`, following the tape's spike mode.
    pub fn heaviside(&mut self, h: Var, v_th: f32, width: f32) -> Result<Var> {
        let surrogate_forward = self.spike_mode == SpikeMode::SurrogateForward;
        self.apply(Primitive::HeavisideWithSurrogate { v_th, width, surrogate_forward }, &[h])
    }
}

#[cfg(test)]
mod tests;
