//! Elementwise ops, reductions and the backward dispatcher.

use crate::error::shape_err;
use crate::graph::{accum, accum_with, BinKind, Node, Op, UnKind};
use crate::{Element, Result, Tensor, Var};

/// Maps every output flat index to the flat index of a same-rank operand whose
/// dims are either equal to the output's or 1.
pub(crate) fn broadcast_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut src_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        src_strides[d] = if src[d] == 1 { 0 } else { acc };
        acc *= src[d];
    }
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

fn apply_bin<T: Element>(kind: BinKind, x: T, y: T) -> T {
    match kind {
        BinKind::Add => x + y,
        BinKind::Sub => x - y,
        BinKind::Mul => x * y,
        BinKind::Div => x / y,
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn unary_fwd<T: Element>(kind: UnKind, x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    match kind {
        UnKind::Neg => -x,
        UnKind::Relu => x.max(T::zero()),
        UnKind::Gelu => {
            let c = T::from_f64_lossy(GELU_C);
            let a = T::from_f64_lossy(GELU_A);
            half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
        }
        UnKind::Softplus => x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
        UnKind::Exp => x.exp(),
        UnKind::Recip => x.recip(),
        UnKind::Abs => x.abs(),
        UnKind::Sqr => x * x,
        UnKind::Sqrt => x.sqrt(),
    }
}

/// Local derivative given input `x` and output `y`.
fn unary_deriv<T: Element>(kind: UnKind, x: T, y: T) -> T {
    let half = T::from_f64_lossy(0.5);
    match kind {
        UnKind::Neg => -T::one(),
        UnKind::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        UnKind::Gelu => {
            let c = T::from_f64_lossy(GELU_C);
            let a = T::from_f64_lossy(GELU_A);
            let th = (c * (x + a * x * x * x)).tanh();
            let three = T::from_f64_lossy(3.0);
            half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * a * x * x)
        }
        UnKind::Softplus => T::one() / (T::one() + (-x).exp()),
        UnKind::Exp => y,
        UnKind::Recip => -(y * y),
        UnKind::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        UnKind::Sqr => x + x,
        UnKind::Sqrt => {
            if y > T::zero() {
                half / y
            } else {
                T::zero()
            }
        }
    }
}

fn unary_name(kind: UnKind) -> &'static str {
    match kind {
        UnKind::Neg => "neg",
        UnKind::Relu => "relu",
        UnKind::Gelu => "gelu",
        UnKind::Softplus => "softplus",
        UnKind::Exp => "exp",
        UnKind::Recip => "reciprocal",
        UnKind::Abs => "abs",
        UnKind::Sqr => "sqr",
        UnKind::Sqrt => "sqrt",
    }
}

impl<'g, T: Element> Var<'g, T> {
    fn binary(self, other: Var<'g, T>, kind: BinKind, name: &'static str) -> Result<Var<'g, T>> {
        let a = self.value();
        let b = other.value();
        let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
            shape_err(name, format!("{:?} vs {:?}", a.shape(), b.shape()))
        })?;
        let data: Vec<T> = if a.shape() == b.shape() {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| apply_bin(kind, x, y))
                .collect()
        } else {
            let ma = broadcast_map(a.shape(), &out_shape);
            let mb = broadcast_map(b.shape(), &out_shape);
            ma.iter()
                .zip(&mb)
                .map(|(&i, &j)| apply_bin(kind, a.data()[i], b.data()[j]))
                .collect()
        };
        let out = Tensor::from_vec(out_shape, data)?;
        self.g.push(
            name,
            out,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
        )
    }

    /// Elementwise sum; same-rank operands broadcast along size-1 dims.
    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, BinKind::Add, "add")
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, BinKind::Sub, "sub")
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, BinKind::Mul, "mul")
    }

    pub fn div(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, BinKind::Div, "div")
    }

    pub fn add_scalar(self, c: T) -> Result<Var<'g, T>> {
        let out = self.value().map(|x| x + c);
        self.g.push("add_scalar", out, Op::AddScalar { a: self.id })
    }

    pub fn mul_scalar(self, c: T) -> Result<Var<'g, T>> {
        let out = self.value().map(|x| x * c);
        self.g.push("mul_scalar", out, Op::MulScalar { a: self.id, c })
    }

    fn unary(self, kind: UnKind) -> Result<Var<'g, T>> {
        let out = self.value().map(|x| unary_fwd(kind, x));
        self.g
            .push(unary_name(kind), out, Op::Unary { kind, a: self.id })
    }

    pub fn neg(self) -> Result<Var<'g, T>> {
        self.unary(UnKind::Neg)
    }
    pub fn relu(self) -> Result<Var<'g, T>> {
        self.unary(UnKind::Relu)
    }
    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Result<Var<'g, T>> {
        self.unary(UnKind::Gelu)
    }
    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Result<Var<'g, T>> {
        self.unary(UnKind::Softplus)
    }
    pub fn exp(self) -> Result<Var<'g, T>> {
        self.unary(UnKind::Exp)
    }
    pub fn reciprocal(self) -> Result<Var<'g, T>> {
        self.unary(UnKind::Recip)
    }
    pub fn abs(self) -> Result<Var<'g, T>> {
        self.unary(UnKind::Abs)
    }
    pub fn sqr(self) -> Result<Var<'g, T>> {
        self.unary(UnKind::Sqr)
    }
    /// Square root; the derivative at 0 is taken as 0.
    pub fn sqrt(self) -> Result<Var<'g, T>> {
        self.unary(UnKind::Sqrt)
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(self) -> Result<Var<'g, T>> {
        let s: T = self.value().data().iter().copied().sum();
        self.g.push("sum", Tensor::scalar(s), Op::Sum { a: self.id })
    }

    /// Mean of all entries, shape `[1]`.
    pub fn mean(self) -> Result<Var<'g, T>> {
        let n = self.value().numel();
        let inv = T::one() / T::from_usize(n.max(1)).unwrap();
        self.sum()?.mul_scalar(inv)
    }

    fn reduce_axis(self, axis: usize, mean: bool, name: &'static str) -> Result<Var<'g, T>> {
        let a = self.value();
        let shape = a.shape();
        if axis >= shape.len() {
            return Err(shape_err(name, format!("axis {axis} for rank {}", shape.len())));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let scale = if mean {
            T::one() / T::from_usize(len.max(1)).unwrap()
        } else {
            T::one()
        };
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &a.data()[(o * len + k) * inner..(o * len + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
            }
        }
        if mean {
            out.iter_mut().for_each(|x| *x = *x * scale);
        }
        let mut oshape = shape.to_vec();
        oshape[axis] = 1;
        let t = Tensor::from_vec(oshape, out)?;
        self.g.push(
            name,
            t,
            Op::SumAxis {
                a: self.id,
                axis,
                scale,
            },
        )
    }

    /// Sum over one axis, keeping it with size 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g, T>> {
        self.reduce_axis(axis, false, "sum_axis")
    }

    /// Mean over one axis, keeping it with size 1.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'g, T>> {
        self.reduce_axis(axis, true, "mean_axis")
    }
}

pub(crate) fn backward_node<T: Element>(
    nodes: &[Node<T>],
    id: usize,
    dout: &[T],
    adj: &mut [Option<Vec<T>>],
) {
    let rg = |p: usize| nodes[p].requires_grad;
    let val = |p: usize| &*nodes[p].value;
    let out = &*nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let same = av.shape() == out.shape() && bv.shape() == out.shape();
            let ma = (!same).then(|| broadcast_map(av.shape(), out.shape()));
            let mb = (!same).then(|| broadcast_map(bv.shape(), out.shape()));
            let ia = |i: usize| ma.as_ref().map_or(i, |m| m[i]);
            let ib = |i: usize| mb.as_ref().map_or(i, |m| m[i]);
            if rg(*a) {
                accum_with(adj, *a, av.numel(), |ga| {
                    for (i, &d) in dout.iter().enumerate() {
                        let g = match kind {
                            BinKind::Add | BinKind::Sub => d,
                            BinKind::Mul => d * bv.data()[ib(i)],
                            BinKind::Div => d / bv.data()[ib(i)],
                        };
                        ga[ia(i)] = ga[ia(i)] + g;
                    }
                });
            }
            if rg(*b) {
                accum_with(adj, *b, bv.numel(), |gb| {
                    for (i, &d) in dout.iter().enumerate() {
                        let g = match kind {
                            BinKind::Add => d,
                            BinKind::Sub => -d,
                            BinKind::Mul => d * av.data()[ia(i)],
                            BinKind::Div => {
                                let y = bv.data()[ib(i)];
                                -d * av.data()[ia(i)] / (y * y)
                            }
                        };
                        gb[ib(i)] = gb[ib(i)] + g;
                    }
                });
            }
        }
        Op::AddScalar { a } => {
            if rg(*a) {
                accum(adj, *a, dout.to_vec());
            }
        }
        Op::MulScalar { a, c } => {
            if rg(*a) {
                accum(adj, *a, dout.iter().map(|&d| d * *c).collect());
            }
        }
        Op::Unary { kind, a } => {
            if rg(*a) {
                let x = val(*a).data();
                let y = out.data();
                let g = dout
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&d, (&x, &y))| d * unary_deriv(*kind, x, y))
                    .collect();
                accum(adj, *a, g);
            }
        }
        Op::Sum { a } => {
            if rg(*a) {
                accum(adj, *a, vec![dout[0]; val(*a).numel()]);
            }
        }
        Op::SumAxis { a, axis, scale } => {
            if rg(*a) {
                let shape = val(*a).shape();
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                accum_with(adj, *a, val(*a).numel(), |ga| {
                    for o in 0..outer {
                        let src = &dout[o * inner..(o + 1) * inner];
                        for k in 0..len {
                            let dst = &mut ga[(o * len + k) * inner..(o * len + k + 1) * inner];
                            dst.iter_mut()
                                .zip(src)
                                .for_each(|(g, &d)| *g = *g + d * *scale);
                        }
                    }
                });
            }
        }
        Op::Reshape { .. }
        | Op::Permute { .. }
        | Op::Concat { .. }
        | Op::Slice { .. }
        | Op::Upsample2x { .. } => crate::shape_ops::backward(nodes, id, dout, adj),
        Op::Conv2d { .. } => crate::conv::backward(nodes, id, dout, adj),
        Op::Matmul { .. } => crate::linalg::backward(nodes, id, dout, adj),
        Op::Softmax { .. } | Op::LayerNorm { .. } => crate::nn::backward(nodes, id, dout, adj),
    }
}
