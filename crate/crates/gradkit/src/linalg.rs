use crate::error::shape_err;
use crate::graph::{accum_with, Node, Op};
use crate::{Element, Result, Tensor, Var};

struct MmDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

fn mm_dims(a: &[usize], b: &[usize]) -> Result<MmDims> {
    let err = || shape_err("matmul", format!("{a:?} x {b:?}"));
    if a.len() != 3 {
        return Err(err());
    }
    let (batch, m, k) = (a[0], a[1], a[2]);
    match b {
        [kb, n] if *kb == k => Ok(MmDims { batch, m, k, n: *n, shared_rhs: true }),
        [bb, kb, n] if *bb == batch && *kb == k => Ok(MmDims { batch, m, k, n: *n, shared_rhs: false }),
        _ => Err(err()),
    }
}

impl<'g, T: Element> Var<'g, T> {
    /// Batched product `[B, M, K] × [B, K, N]`, or `[B, M, K] × [K, N]` with the
    /// right operand shared across the batch.
    pub fn matmul(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        let a = self.value();
        let b = rhs.value();
        let d = mm_dims(a.shape(), b.shape())?;
        let mut out = vec![T::zero(); d.batch * d.m * d.n];
        for bi in 0..d.batch {
            let ab = &a.data()[bi * d.m * d.k..(bi + 1) * d.m * d.k];
            let bb = if d.shared_rhs { b.data() } else { &b.data()[bi * d.k * d.n..(bi + 1) * d.k * d.n] };
            let ob = &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n];
            T::gemm(d.m, d.k, d.n, ab, (d.k as isize, 1), bb, (d.n as isize, 1), ob, (d.n as isize, 1), false);
        }
        let t = Tensor::from_vec(vec![d.batch, d.m, d.n], out)?;
        self.g.push("matmul", t, Op::Matmul { a: self.id, b: rhs.id })
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose_last(self) -> Result<Var<'g, T>> {
        self.permute(&[0, 2, 1])
    }

    /// `x · w + b` over the last axis of `x`, for any leading shape.
    pub fn linear(self, w: Var<'g, T>, b: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let ws = w.shape();
        let k = *shape.last().ok_or_else(|| shape_err("linear", "rank 0 input"))?;
        if ws.len() != 2 || ws[0] != k {
            return Err(shape_err("linear", format!("input {shape:?}, weight {ws:?}")));
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let y = self.reshape(&[1, rows, k])?.matmul(w)?;
        let y = match b {
            Some(b) => y.add(b.reshape(&[1, 1, ws[1]])?)?,
            None => y,
        };
        let mut oshape = shape.clone();
        *oshape.last_mut().unwrap() = ws[1];
        y.reshape(&oshape)
    }
}

pub(crate) fn backward<T: Element>(nodes: &[Node<T>], id: usize, dout: &[T], adj: &mut [Option<Vec<T>>]) {
    let Op::Matmul { a, b } = &nodes[id].op else { unreachable!() };
    let av = &*nodes[*a].value;
    let bv = &*nodes[*b].value;
    let d = mm_dims(av.shape(), bv.shape()).expect("validated in forward");
    if nodes[*a].requires_grad {
        accum_with(adj, *a, av.numel(), |ga| {
            for bi in 0..d.batch {
                let db = &dout[bi * d.m * d.n..(bi + 1) * d.m * d.n];
                let bb = if d.shared_rhs { bv.data() } else { &bv.data()[bi * d.k * d.n..(bi + 1) * d.k * d.n] };
                let gab = &mut ga[bi * d.m * d.k..(bi + 1) * d.m * d.k];
                // da = dout · bᵀ
                T::gemm(d.m, d.n, d.k, db, (d.n as isize, 1), bb, (1, d.n as isize), gab, (d.k as isize, 1), true);
            }
        });
    }
    if nodes[*b].requires_grad {
        accum_with(adj, *b, bv.numel(), |gb| {
            for bi in 0..d.batch {
                let db = &dout[bi * d.m * d.n..(bi + 1) * d.m * d.n];
                let ab = &av.data()[bi * d.m * d.k..(bi + 1) * d.m * d.k];
                let gbb = if d.shared_rhs { &mut gb[..] } else { &mut gb[bi * d.k * d.n..(bi + 1) * d.k * d.n] };
                // db = aᵀ · dout
                T::gemm(d.k, d.m, d.n, ab, (1, d.k as isize), db, (d.n as isize, 1), gbb, (d.n as isize, 1), true);
            }
        });
    }
}
