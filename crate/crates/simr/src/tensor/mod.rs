//! Dense row-major tensors on a recording tape with reverse-mode gradients.
//!
//! A [`Graph`] is a flat tape: every op appends a node holding its kind, input
//! ids, shape and materialized value, so node ids are already in topological
//! order and [`Graph::backward`] is a single reverse sweep. Graphs are cheap
//! and rebuilt per training step; persistent state (parameters, optimizer
//! moments) lives outside in [`crate::params::ParamSet`].
//!
//! Everything is generic over [`Scalar`] so the same model code runs in f32
//! for training and f64 for finite-difference gradient checks.

pub mod backward;
pub mod gradcheck;
pub mod ops;
pub mod shape;

use crate::error::{Error, Result};
use shape::num_elems;

/// Float type a graph computes in. f32 for training, f64 for gradient checks.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

pub type NodeId = usize;

/// Recorded operation kind plus its input ids and static attributes.
/// Scalar attributes are kept as f64 and converted at use.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    MatMul(NodeId, NodeId),
    Bmm(NodeId, NodeId),
    Permute(NodeId, Vec<usize>),
    Reshape(NodeId),
    BroadcastTo(NodeId),
    Concat(Vec<NodeId>, usize),
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Exp(NodeId),
    Log(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Softmax(NodeId, usize),
    LogSoftmax(NodeId, usize),
    L2Normalize(NodeId, usize),
    Sum(NodeId, Option<usize>),
    Mean(NodeId, Option<usize>),
    LayerNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Gather {
        table: NodeId,
        indices: Vec<usize>,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::ScalarMul(..) => "scalar_mul",
            Op::MatMul(..) => "matmul",
            Op::Bmm(..) => "bmm",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::L2Normalize(..) => "l2_normalize",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
        }
    }

}

pub(crate) struct Node<S> {
    pub op: Op,
    pub shape: Vec<usize>,
    pub value: Vec<S>,
    /// Persistent accumulated gradient; repeated backward calls add into it.
    pub grad: Option<Vec<S>>,
    pub needs_grad: bool,
}

pub struct Graph<S: Scalar> {
    pub(crate) nodes: Vec<Node<S>>,
    check_finite: bool,
    /// Number of zero-norm rows seen by l2_normalize (defined as output 0).
    zero_norm_events: usize,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: true,
            zero_norm_events: 0,
        }
    }

    /// Disable the per-op NaN/Inf scan (useful in finite-difference loops
    /// where the caller checks the final loss instead).
    pub fn set_finite_checks(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn zero_norm_events(&self) -> usize {
        self.zero_norm_events
    }

    pub(crate) fn note_zero_norm(&mut self) {
        self.zero_norm_events += 1;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Append a leaf holding `data`. `needs_grad` marks it as a parameter.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<S>, needs_grad: bool) -> Result<NodeId> {
        if num_elems(shape) != data.len() {
            return Err(Error::Shape {
                op: "leaf",
                detail: format!("shape {shape:?} wants {} elems, got {}", num_elems(shape), data.len()),
            });
        }
        self.push(Op::Leaf, shape.to_vec(), data, needs_grad)
    }

    /// Leaf that never receives gradient (input data, masks, constants).
    pub fn constant(&mut self, shape: &[usize], data: Vec<S>) -> Result<NodeId> {
        self.leaf(shape, data, false)
    }

    /// Rank-0 constant.
    pub fn scalar(&mut self, v: S) -> NodeId {
        self.leaf(&[], vec![v], false)
            .expect("scalar leaf cannot fail")
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        &self.nodes[id].value
    }

    /// Value of a rank-0 node.
    pub fn scalar_value(&self, id: NodeId) -> S {
        self.nodes[id].value[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn push(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        value: Vec<S>,
        needs_grad: bool,
    ) -> Result<NodeId> {
        debug_assert_eq!(num_elems(&shape), value.len());
        if self.check_finite {
            if let Some(bad) = value.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite value {bad} produced by op `{}`",
                    op.name()
                )));
            }
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape,
            value,
            grad: None,
            needs_grad,
        });
        Ok(id)
    }

    /// Shared preamble for op builders: does any input carry gradient?
    pub(crate) fn any_needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_shape_mismatch_rejected() {
        let mut g: Graph<f32> = Graph::new();
        let err = g.leaf(&[2, 2], vec![1.0, 2.0, 3.0], false).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "leaf", .. }));
    }

    #[test]
    fn finite_check_rejects_nan_leaf() {
        let mut g: Graph<f32> = Graph::new();
        let err = g.leaf(&[1], vec![f32::NAN], false).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn finite_check_can_be_disabled() {
        let mut g: Graph<f32> = Graph::new();
        g.set_finite_checks(false);
        assert!(g.leaf(&[1], vec![f32::INFINITY], false).is_ok());
    }
}
