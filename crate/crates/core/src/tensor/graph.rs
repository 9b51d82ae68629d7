use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::ConvGeom;
use super::ops_nn::PoolKind;
use super::{Element, Result, Tensor, TensorError};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    pub(super) index: usize,
}

pub(super) struct Node<T: Element> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Recorded operation together with whatever the backward rule needs.
pub(super) enum Op<T: Element> {
    Leaf,
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: T,
    },
    Sum {
        x: usize,
    },
    Mse {
        a: usize,
        b: usize,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        a: usize,
        b: usize,
        axis: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Relu {
        x: usize,
    },
    Gelu {
        x: usize,
    },
    Dropout {
        x: usize,
        mask: Vec<T>,
    },
    Softmax {
        x: usize,
    },
    MaskedFill {
        x: usize,
        mask: Vec<bool>,
    },
    ChannelBias {
        x: usize,
        bias: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    Pool {
        x: usize,
        kind: PoolKind,
        argmax: Vec<u32>,
    },
    GroupNorm {
        x: usize,
        gain: usize,
        bias: usize,
        groups: usize,
        xhat: Vec<T>,
        inv_std: Vec<f64>,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        inv_std: Vec<f64>,
    },
}

/// Operation tape: every value produced by an operator is appended in
/// execution order and [`Graph::backward`] replays the tape in reverse.
pub struct Graph<T: Element = f32> {
    id: u64,
    pub(super) nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it is differentiable iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad;
        self.push_node(tensor, Op::Leaf, requires_grad)
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.push_node(tensor, Op::Leaf, true)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push_node(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.graph, self.id, "variable belongs to a different graph");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub(super) fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::Usage(
                "variable is not recorded on this graph".into(),
            ));
        }
        Ok(v.index)
    }

    pub(super) fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index,
        }
    }

    /// Pushes a derived node whose grad flag is the OR of its inputs.
    pub(super) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push_node(value, op, requires_grad)
    }

    /// Back-propagates from a one-element `loss` to every differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.check(loss)?;
        let node = &self.nodes[root];
        if node.value.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(TensorError::Usage(
                "loss is not connected to any differentiable leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);
        for i in (0..=root).rev() {
            let n = &self.nodes[i];
            if !n.requires_grad || matches!(n.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            super::ops_basic::backward(i, &gout, &self.nodes, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let n = &self.nodes[i];
                match (&n.op, g) {
                    (Op::Leaf, Some(g)) => Some(Tensor::from_parts(n.value.shape().to_vec(), g)),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }
}

/// Accumulated gradients of the differentiable leaves of a graph.
pub struct Gradients<T: Element = f32> {
    graph: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of `v`, or `None` if `v` is not a leaf reached by backward.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled when the leaf was not reached.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}

/// Adds `contrib` into the gradient slot of node `idx` if that node needs it.
pub(super) fn accumulate<T: Element>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    idx: usize,
    contrib: Vec<T>,
) {
    if !nodes[idx].requires_grad {
        return;
    }
    match &mut grads[idx] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

pub(super) fn needs<T: Element>(nodes: &[Node<T>], idx: usize) -> bool {
    nodes[idx].requires_grad
}
