use crate::error::shape_err;
use crate::graph::{accum, accum_with, Node, Op};
use crate::{Element, Result, Tensor, Var};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Source flat index for each destination flat index of a permutation.
fn permute_map(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        map.push((0..rank).map(|d| idx[d] * src_strides[perm[d]]).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

impl<'g, T: Element> Var<'g, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let t = (*self.value()).clone().reshape(shape)?;
        self.g.push("reshape", t, Op::Reshape { a: self.id })
    }

    /// Reorders axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'g, T>> {
        let a = self.value();
        let rank = a.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{perm:?} for rank {rank}")));
        }
        let (out_shape, map) = permute_map(a.shape(), perm);
        let data = map.iter().map(|&i| a.data()[i]).collect();
        let t = Tensor::from_vec(out_shape, data)?;
        self.g.push(
            "permute",
            t,
            Op::Permute {
                a: self.id,
                perm: perm.to_vec(),
            },
        )
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no parts"))?;
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = vals[0].shape().to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} for rank {}", base.len())));
        }
        for v in &vals {
            let s = v.shape();
            if s.len() != base.len() || (0..s.len()).any(|d| d != axis && s[d] != base[d]) {
                return Err(shape_err("concat", format!("{s:?} vs {base:?}")));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = vals.iter().map(|v| v.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &vals {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::from_vec(shape, data)?;
        first.g.push(
            "concat",
            t,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        )
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let a = self.value();
        let shape = a.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&a.data()[base..base + len * inner]);
        }
        let mut oshape = shape.to_vec();
        oshape[axis] = len;
        let t = Tensor::from_vec(oshape, data)?;
        self.g.push(
            "slice",
            t,
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
        )
    }

    /// Nearest-neighbour ×2 upsampling of the last two axes of a rank-4 tensor.
    pub fn upsample2x(self) -> Result<Var<'g, T>> {
        let a = self.value();
        let s = a.shape();
        if s.len() != 4 {
            return Err(shape_err("upsample2x", format!("{s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut data = Vec::with_capacity(planes * 4 * h * w);
        for p in 0..planes {
            let src = &a.data()[p * h * w..(p + 1) * h * w];
            for y in 0..2 * h {
                let row = &src[(y / 2) * w..(y / 2 + 1) * w];
                for x in 0..2 * w {
                    data.push(row[x / 2]);
                }
            }
        }
        let t = Tensor::from_vec(vec![s[0], s[1], 2 * h, 2 * w], data)?;
        self.g.push("upsample2x", t, Op::Upsample2x { a: self.id })
    }
}

pub(crate) fn backward<T: Element>(nodes: &[Node<T>], id: usize, dout: &[T], adj: &mut [Option<Vec<T>>]) {
    let rg = |p: usize| nodes[p].requires_grad;
    match &nodes[id].op {
        Op::Reshape { a } => {
            if rg(*a) {
                accum(adj, *a, dout.to_vec());
            }
        }
        Op::Permute { a, perm } => {
            if rg(*a) {
                let src = nodes[*a].value.shape();
                let (_, map) = permute_map(src, perm);
                accum_with(adj, *a, map.len(), |ga| {
                    for (i, &j) in map.iter().enumerate() {
                        ga[j] = ga[j] + dout[i];
                    }
                });
            }
        }
        Op::Concat { parts, axis } => {
            let out_shape = nodes[id].value.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let total = out_shape[*axis];
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.shape()[*axis];
                if rg(p) {
                    accum_with(adj, p, outer * len * inner, |gp| {
                        for o in 0..outer {
                            let src = &dout[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(g, &d)| *g = *g + d);
                        }
                    });
                }
                offset += len;
            }
        }
        Op::Slice { a, axis, start } => {
            if rg(*a) {
                let shape = nodes[*a].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let full = shape[*axis];
                let len = nodes[id].value.shape()[*axis];
                accum_with(adj, *a, nodes[*a].value.numel(), |ga| {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        let dst = &mut ga[base..base + len * inner];
                        let src = &dout[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(g, &d)| *g = *g + d);
                    }
                });
            }
        }
        Op::Upsample2x { a } => {
            if rg(*a) {
                let s = nodes[*a].value.shape();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                accum_with(adj, *a, planes * h * w, |ga| {
                    for p in 0..planes {
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                let g = &mut ga[p * h * w + (y / 2) * w + x / 2];
                                *g = *g + dout[p * 4 * h * w + y * 2 * w + x];
                            }
                        }
                    }
                });
            }
        }
        _ => unreachable!("not a shape op"),
    }
}
