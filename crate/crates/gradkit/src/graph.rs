use std::cell::RefCell;
use std::rc::Rc;

use crate::error::GradError;
use crate::{Element, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnKind {
    Neg,
    Relu,
    Gelu,
    Softplus,
    Exp,
    Recip,
    Abs,
    Sqr,
    Sqrt,
}

pub(crate) enum Op<T> {
    Leaf,
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
    },
    AddScalar {
        a: usize,
    },
    MulScalar {
        a: usize,
        c: T,
    },
    Unary {
        kind: UnKind,
        a: usize,
    },
    Sum {
        a: usize,
    },
    SumAxis {
        a: usize,
        axis: usize,
        scale: T,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Upsample2x {
        a: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        cols: Vec<T>,
    },
    Matmul {
        a: usize,
        b: usize,
    },
    Softmax {
        a: usize,
    },
    LayerNorm {
        a: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } | Op::Matmul { a, b } => vec![*a, *b],
            Op::AddScalar { a }
            | Op::MulScalar { a, .. }
            | Op::Unary { a, .. }
            | Op::Sum { a }
            | Op::SumAxis { a, .. }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::Slice { a, .. }
            | Op::Upsample2x { a }
            | Op::Softmax { a } => vec![*a],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::LayerNorm { a, gamma, beta, .. } => vec![*a, *gamma, *beta],
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Rc<Tensor<T>>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<T>>,
}

/// Recording tape for one forward/backward pass.
pub struct Graph<T> {
    pub(crate) nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T> {
    pub(crate) g: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Var {
            g: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(GradError::NonFinite { op: op_name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub fn value(&self, v: Var<'_, T>) -> Rc<Tensor<T>> {
        self.nodes.borrow()[v.id].value.clone()
    }

    /// Accumulated gradient of a differentiable node, if any backward pass reached it.
    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_vec(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are added to whatever a
    /// previous call left behind.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let mut adj: Vec<Option<Vec<T>>> = {
            let nodes = self.nodes.borrow();
            let shape = nodes[loss.id].value.shape();
            if nodes[loss.id].value.numel() != 1 {
                return Err(GradError::NotScalar(shape.to_vec()));
            }
            for (id, node) in nodes.iter().enumerate().take(loss.id + 1) {
                if let Some(&parent) = node.op.parents().iter().find(|&&p| p >= id) {
                    return Err(GradError::Cycle { node: id, parent });
                }
            }
            (0..=loss.id).map(|_| None).collect()
        };
        adj[loss.id] = Some(vec![T::one()]);
        {
            let nodes = self.nodes.borrow();
            for id in (0..=loss.id).rev() {
                let Some(dout) = adj[id].take() else { continue };
                if !nodes[id].requires_grad {
                    continue;
                }
                crate::ops::backward_node(&nodes, id, &dout, &mut adj);
                adj[id] = Some(dout);
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        for (id, a) in adj.into_iter().enumerate() {
            let Some(a) = a else { continue };
            let node = &mut nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(g) => g.iter_mut().zip(&a).for_each(|(g, d)| *g = *g + *d),
                None => node.grad = Some(a),
            }
        }
        Ok(())
    }
}

impl<'g, T: Element> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.g
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.g.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.g.requires_grad(self.id)
    }
}

/// Adds `src` into the adjoint slot of `id`, allocating on first touch.
pub(crate) fn accum<T: Element>(adj: &mut [Option<Vec<T>>], id: usize, src: Vec<T>) {
    match &mut adj[id] {
        Some(a) => a.iter_mut().zip(src).for_each(|(a, s)| *a = *a + s),
        slot @ None => *slot = Some(src),
    }
}

/// Like [`accum`] but hands the closure a mutable buffer of length `n`.
pub(crate) fn accum_with<T: Element>(
    adj: &mut [Option<Vec<T>>],
    id: usize,
    n: usize,
    f: impl FnOnce(&mut [T]),
) {
    let slot = adj[id].get_or_insert_with(|| vec![T::zero(); n]);
    f(slot);
}
