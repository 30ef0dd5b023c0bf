use std::cell::{Ref, RefCell};
use std::fmt::Write as _;

use super::{ops, Real, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Dense,
    Conv2d,
    Relu,
    GlobalAvgPool,
    Reshape,
    L2Normalize,
    RowDot,
    SoftmaxCrossEntropy,
    SigmoidBce,
    StopGradient,
    Add,
    Mul,
    Scale,
    Sum,
    Mean,
    WeightedMean,
}

impl OpKind {
    pub const ALL: [OpKind; 17] = [
        OpKind::Leaf,
        OpKind::Dense,
        OpKind::Conv2d,
        OpKind::Relu,
        OpKind::GlobalAvgPool,
        OpKind::Reshape,
        OpKind::L2Normalize,
        OpKind::RowDot,
        OpKind::SoftmaxCrossEntropy,
        OpKind::SigmoidBce,
        OpKind::StopGradient,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::WeightedMean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Dense => "dense",
            OpKind::Conv2d => "conv2d",
            OpKind::Relu => "relu",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Reshape => "reshape",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::RowDot => "row_dot",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::SigmoidBce => "sigmoid_bce",
            OpKind::StopGradient => "stop_gradient",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::WeightedMean => "weighted_mean",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Dense { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, b: Option<Var>, stride: usize, pad: usize },
    Relu { x: Var },
    GlobalAvgPool { x: Var },
    Reshape { x: Var },
    L2Normalize { x: Var, norms: Vec<T> },
    RowDot { a: Var, b: Var },
    SoftmaxCrossEntropy { logits: Var, target: Vec<T>, probs: Vec<T> },
    SigmoidBce { logits: Var, target: Vec<T> },
    StopGradient { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Sum { x: Var },
    Mean { x: Var },
    WeightedMean { x: Var, w: Vec<T> },
}

impl<T> Op<T> {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Dense { .. } => OpKind::Dense,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu { .. } => OpKind::Relu,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::RowDot { .. } => OpKind::RowDot,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::SigmoidBce { .. } => OpKind::SigmoidBce,
            Op::StopGradient { .. } => OpKind::StopGradient,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::WeightedMean { .. } => OpKind::WeightedMean,
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Dense { x, w, b } => vec![x, w, b],
            Op::Conv2d { x, k, b, .. } => {
                let mut v = vec![x, k];
                v.extend(b);
                v
            }
            Op::Relu { x }
            | Op::GlobalAvgPool { x }
            | Op::Reshape { x }
            | Op::L2Normalize { x, .. }
            | Op::StopGradient { x }
            | Op::Scale { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::WeightedMean { x, .. } => vec![x],
            Op::SoftmaxCrossEntropy { logits, .. } | Op::SigmoidBce { logits, .. } => vec![logits],
            Op::RowDot { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![a, b],
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) op: Op<T>,
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
    pub(crate) label: Option<String>,
}

/// Append-only record of a forward computation.
///
/// A tape is single-threaded; build one per forward/backward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    sabotage: Option<OpKind>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, available for leaf nodes.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            sabotage: None,
        }
    }

    /// A tape whose backward rule for `kind` is deliberately wrong; used to
    /// confirm the gradient checker notices broken rules.
    pub fn with_sabotage(kind: Option<OpKind>) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            sabotage: kind,
        }
    }

    pub fn sabotage(&self) -> Option<OpKind> {
        self.sabotage
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, op: Op<T>, value: Tensor<T>) -> Result<Var> {
        let kind = op.kind();
        if !value.all_finite() {
            let bad = value.data().iter().filter(|v| !v.is_finite()).count();
            return Err(Error::numeric(
                kind.name(),
                format!("{bad} non-finite outputs of shape {:?}", value.shape()),
            ));
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match op {
            Op::Leaf | Op::StopGradient { .. } => false,
            _ => op.inputs().iter().any(|v| nodes[v.0].requires_grad),
        };
        nodes.push(Node {
            op,
            value,
            requires_grad,
            label: None,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// A leaf. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        let v = self.push(Op::Leaf, value)?;
        self.nodes.borrow_mut()[v.0].requires_grad = requires_grad;
        Ok(v)
    }

    pub fn constant(&self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn set_label(&self, v: Var, label: impl Into<String>) {
        self.nodes.borrow_mut()[v.0].label = Some(label.into());
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Reverse sweep from a scalar `loss`. Each node is visited once;
    /// contributions to shared inputs are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let loss_node = nodes
            .get(loss.0)
            .ok_or_else(|| Error::Contract(format!("{loss:?} is not on this tape")))?;
        if loss_node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        let mut out: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        out.resize_with(loss.0 + 1, || None);
        if !loss_node.requires_grad {
            return Ok(Gradients { grads: out });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                out[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            if !node.requires_grad {
                continue;
            }
            let kind = node.op.kind();
            let needs: Vec<bool> = node.op.inputs().iter().map(|v| nodes[v.0].requires_grad).collect();
            let mut contributions = ops::backward(node, &g, &nodes, &needs)?;
            if self.sabotage == Some(kind) {
                for (_, c) in contributions.iter_mut() {
                    c.iter_mut().for_each(|x| *x = *x * T::of(1.5));
                }
            }
            for (input, c) in contributions {
                if !nodes[input.0].requires_grad {
                    continue;
                }
                if c.iter().any(|x| !x.is_finite()) {
                    return Err(Error::numeric(kind.name(), "non-finite gradient during backward"));
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    /// Text rendering of the recorded DAG, one node per line.
    pub fn dump(&self) -> String {
        let nodes = self.nodes.borrow();
        let mut s = String::new();
        for (i, n) in nodes.iter().enumerate() {
            let inputs: Vec<String> = n.op.inputs().iter().map(|v| format!("%{}", v.0)).collect();
            let _ = write!(s, "%{i} = {}({}) {:?}", n.op.kind(), inputs.join(", "), n.value.shape());
            if n.requires_grad {
                s.push_str(" grad");
            }
            if let Some(label) = &n.label {
                let _ = write!(s, " \"{label}\"");
            }
            s.push('\n');
        }
        s
    }
}
