//! Tape-based reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Every operation appends a [`TensorNode`] to a [`Tape`] and returns a
//! [`Var`] handle. Because nodes are only ever appended, arena order is a
//! topological order of the graph, and [`Tape::backward`] is a single reverse
//! sweep that visits each node once.
//!
//! Gradients accumulate across calls to `backward` until [`Tape::zero_grad`]
//! is called. Any operation that would produce a NaN or infinity fails with
//! [`Error::NonFinite`] instead of recording the node.

mod loss;
mod ops;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient scale applied by [`Tape::grad_reverse`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradScale(f64);

impl GradScale {
    pub fn new(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::Contract(format!(
                "gradient reversal scale must be finite and >= 0, got {alpha}"
            )));
        }
        Ok(Self(alpha))
    }

    pub fn alpha(self) -> f64 {
        self.0
    }
}

/// Backward rule plus parent links of a node.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LogSoftmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Gelu(Var),
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    CausalMask(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    GradReverse {
        x: Var,
        alpha: f64,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<Option<usize>>,
        count: usize,
    },
    KlDivergence {
        logits: Var,
        ref_probs: Vec<f64>,
        model_probs: Vec<f64>,
        mask: Vec<bool>,
        count: usize,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Gelu(x)
            | Op::CausalMask(x)
            | Op::GatherRows { src: x, .. }
            | Op::SliceCols { x, .. }
            | Op::SliceRows { x, .. }
            | Op::GradReverse { x, .. }
            | Op::CrossEntropy { logits: x, .. }
            | Op::KlDivergence { logits: x, .. } => vec![*x],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
        }
    }
}

/// A value buffer, its (lazily allocated) gradient, and its backward linkage.
#[derive(Clone, Debug)]
pub struct TensorNode {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

impl TensorNode {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<TensorNode>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf".into()));
        }
        Ok(self.push_node(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn node(&self, v: Var) -> &TensorNode {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of `v`, or zeros when nothing has flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.value(v).numel()])
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(TensorNode {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends a derived node after checking its value is finite.
    pub(crate) fn push(&mut self, name: &str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = op.parents().iter().any(|&p| self.requires(p));
        Ok(self.push_node(value, op, requires_grad))
    }

    /// Reverse sweep from a scalar root, accumulating into `grad` of every
    /// node that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        if !self.requires(root) {
            return Ok(());
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adjoints[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = adjoints[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            ops::backprop(&self.nodes, i, &g, &mut adjoints)?;
            adjoints[i] = Some(g);
        }
        for (i, adj) in adjoints.into_iter().enumerate() {
            let Some(adj) = adj else { continue };
            let node = &mut self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if adj.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of node {i}")));
            }
            match &mut node.grad {
                Some(grad) => grad.iter_mut().zip(&adj).for_each(|(a, b)| *a += b),
                None => node.grad = Some(adj),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
