//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every forward op appends a [`Node`] holding its output values, shape, and
//! an [`Op`] descriptor naming its inputs. [`Tape::backward`] walks the nodes
//! in reverse creation order and accumulates vector-Jacobian products into
//! `grad` buffers. Handles are plain indices ([`Var`]), so graphs are built
//! imperatively and freed by dropping the tape.
//!
//! All tensors are dense row-major `f32`. Shapes use the conventions
//! `[N,C,H,W]` for feature maps and `[R,D]` for token/row matrices.

use std::sync::Arc;

use crate::error::{Error, Result};

pub mod gemm;
mod ops;

#[cfg(any(test, feature = "oracle"))]
pub mod fdcheck;

#[cfg(test)]
mod tests;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    /// Index of this node on its tape.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operation descriptor. Input handles refer to earlier nodes
/// on the same tape.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f32),
    AddScalar(Var, f32),
    Silu(Var),
    Sigmoid(Var),
    Log(Var),
    /// x `[N,C,H,W]` + bias `[C]`, broadcast over N,H,W.
    BiasAddChannel { x: Var, bias: Var },
    /// x `[R,D]` + bias `[D]`, broadcast over rows.
    BiasAddRow { x: Var, bias: Var },
    /// a `[m,k]` × b `[k,n]` → `[m,n]`.
    Matmul { a: Var, b: Var },
    /// `[r,c]` → `[c,r]`.
    Transpose(Var),
    Reshape(Var),
    /// Row-wise softmax on `[r,c]`.
    SoftmaxRows(Var),
    /// Gather rows of `table` `[V,D]` → `[ids.len(),D]`.
    Embed { table: Var, ids: Arc<Vec<usize>> },
    /// Mean over consecutive row groups: `[g*group,c]` → `[g,c]`.
    GroupMeanRows { x: Var, group: usize },
    SumAll(Var),
    MeanAll(Var),
    /// Row sums: `[r,c]` → `[r]`.
    SumRows(Var),
    /// Mean squared error over all elements → scalar.
    Mse(Var, Var),
    /// Mean binary cross-entropy from logits → scalar. Targets carry no grad.
    BceWithLogits { logits: Var, targets: Var },
    /// input `[N,Cin,H,W]` ∗ kernel `[Cout,Cin,K,K]`, zero padding.
    Conv2d { input: Var, kernel: Var, stride: usize, pad: usize },
    /// Nearest-neighbour ×2 upsample of `[N,C,H,W]`.
    Upsample2x(Var),
    /// GroupNorm over `[N,C,H,W]` with per-channel affine, eps 1e-5.
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize },
    /// Concat along C: `[N,Ca,H,W]` ++ `[N,Cb,H,W]`.
    ConcatChannels(Var, Var),
    /// Channel slice `from..to` of `[N,C,H,W]`.
    SliceChannels { x: Var, from: usize, to: usize },
}

impl Op {
    /// Short name used in error messages.
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Silu(..) => "silu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Log(..) => "log",
            Op::BiasAddChannel { .. } => "bias_add_channel",
            Op::BiasAddRow { .. } => "bias_add_row",
            Op::Matmul { .. } => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::Embed { .. } => "embed",
            Op::GroupMeanRows { .. } => "group_mean_rows",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::SumRows(..) => "sum_rows",
            Op::Mse(..) => "mse",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x(..) => "upsample_2x",
            Op::GroupNorm { .. } => "group_norm",
            Op::ConcatChannels(..) => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
        }
    }
}

struct Node {
    values: Arc<Vec<f32>>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
    op: Op,
}

/// Wengert-list tape. Create one per forward pass and drop it afterwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), backward_done: false }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a constant input (no gradient).
    pub fn leaf(&mut self, values: Vec<f32>, shape: &[usize]) -> Result<Var> {
        self.leaf_shared(Arc::new(values), shape, false)
    }

    /// Record an input that should receive a gradient.
    pub fn leaf_grad(&mut self, values: Vec<f32>, shape: &[usize]) -> Result<Var> {
        self.leaf_shared(Arc::new(values), shape, true)
    }

    /// Record an input backed by shared storage (e.g. a parameter tensor).
    pub fn leaf_shared(
        &mut self,
        values: Arc<Vec<f32>>,
        shape: &[usize],
        requires_grad: bool,
    ) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel == 0 {
            return Err(Error::tensor("leaf", format!("empty shape {shape:?}")));
        }
        if values.len() != numel {
            return Err(Error::tensor(
                "leaf",
                format!("{} values for shape {shape:?}", values.len()),
            ));
        }
        self.push(Op::Leaf, values, shape.to_vec(), requires_grad)
    }

    /// Values of a node.
    pub fn values(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].values
    }

    /// Shared handle to a node's values (no copy).
    pub fn values_arc(&self, v: Var) -> Arc<Vec<f32>> {
        Arc::clone(&self.nodes[v.0].values)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].values.len()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Op descriptor of node `ix`. Used by replay oracles and tests.
    pub fn op(&self, ix: usize) -> &Op {
        &self.nodes[ix].op
    }

    /// Gradient of a node, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Move a node's gradient out of the tape.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        self.nodes[v.0].grad.take()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> Result<f32> {
        let vals = self.values(v);
        if vals.len() != 1 {
            return Err(Error::tensor("scalar", format!("numel {} != 1", vals.len())));
        }
        Ok(vals[0])
    }

    /// Run reverse accumulation from a scalar output.
    ///
    /// Fails if `out` is not a scalar, if any gradient is non-finite, or if
    /// backward already ran on this tape (gradients would double-count).
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::tensor("backward", "tape already differentiated"));
        }
        self.backward_done = true;
        if self.numel(out) != 1 {
            return Err(Error::tensor(
                "backward",
                format!("output has shape {:?}, expected scalar", self.shape(out)),
            ));
        }
        if !self.nodes[out.0].requires_grad {
            return Err(Error::tensor(
                "backward",
                "output does not depend on any differentiable leaf",
            ));
        }
        self.nodes[out.0].grad = Some(vec![1.0]);
        for ix in (0..=out.0).rev() {
            if self.nodes[ix].grad.is_none() || !self.nodes[ix].requires_grad {
                continue;
            }
            self.backprop_node(ix)?;
            let node = &self.nodes[ix];
            if let Some(g) = &node.grad {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { op: node.op.name() });
                }
            }
        }
        Ok(())
    }

    fn push(
        &mut self,
        op: Op,
        values: Arc<Vec<f32>>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { values, shape, requires_grad, grad: None, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Append a computed node; output finiteness is checked.
    pub(crate) fn push_computed(
        &mut self,
        op: Op,
        values: Vec<f32>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> Result<Var> {
        self.push(op, Arc::new(values), shape, requires_grad)
    }

    /// Add `delta` into the gradient buffer of `v` (ignored for nodes that
    /// don't require grad).
    pub(crate) fn accum(&mut self, v: Var, delta: &[f32]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                debug_assert_eq!(g.len(), delta.len());
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => node.grad = Some(delta.to_vec()),
        }
    }

    /// Like [`Self::accum`] but takes ownership to avoid a copy when the
    /// buffer is freshly allocated.
    pub(crate) fn accum_owned(&mut self, v: Var, delta: Vec<f32>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                debug_assert_eq!(g.len(), delta.len());
                for (gi, di) in g.iter_mut().zip(&delta) {
                    *gi += di;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    pub(crate) fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub(crate) fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::tensor(
                op,
                format!("shape mismatch {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }
}
