use crate::error::shape_err;
use crate::graph::{accum, accum_with, Node, Op};
use crate::{Element, Result, Tensor, Var};

/// Variance floor used by [`Var::layer_norm`]; a constant row normalizes to 0.
pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<'g, T: Element> Var<'g, T> {
    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'g, T>> {
        let a = self.value();
        let len = *a.shape().last().ok_or_else(|| shape_err("softmax", "rank 0"))?;
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(len.max(1)) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s = s + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        let t = Tensor::from_vec(a.shape().to_vec(), out)?;
        self.g.push("softmax", t, Op::Softmax { a: self.id })
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta` of that length.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>) -> Result<Var<'g, T>> {
        let a = self.value();
        let c = *a.shape().last().ok_or_else(|| shape_err("layer_norm", "rank 0"))?;
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(shape_err(
                "layer_norm",
                format!("features {c}, gamma {:?}, beta {:?}", gv.shape(), bv.shape()),
            ));
        }
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let inv_c = T::one() / T::from_usize(c).unwrap();
        let rows = a.numel() / c.max(1);
        let mut xhat = vec![T::zero(); a.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); a.numel()];
        for r in 0..rows {
            let x = &a.data()[r * c..(r + 1) * c];
            let mean = x.iter().copied().sum::<T>() * inv_c;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for j in 0..c {
                let h = (x[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::from_vec(a.shape().to_vec(), out)?;
        self.g.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                a: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
        )
    }
}

pub(crate) fn backward<T: Element>(nodes: &[Node<T>], id: usize, dout: &[T], adj: &mut [Option<Vec<T>>]) {
    match &nodes[id].op {
        Op::Softmax { a } => {
            if !nodes[*a].requires_grad {
                return;
            }
            let y = nodes[id].value.data();
            let len = *nodes[id].value.shape().last().unwrap();
            let mut g = vec![T::zero(); y.len()];
            for ((gr, yr), dr) in g.chunks_mut(len).zip(y.chunks(len)).zip(dout.chunks(len)) {
                let dot: T = yr.iter().zip(dr).map(|(&y, &d)| y * d).sum();
                for j in 0..len {
                    gr[j] = yr[j] * (dr[j] - dot);
                }
            }
            accum(adj, *a, g);
        }
        Op::LayerNorm { a, gamma, beta, xhat, rstd } => {
            let gv = &*nodes[*gamma].value;
            let c = gv.numel();
            if nodes[*gamma].requires_grad {
                accum_with(adj, *gamma, c, |gg| {
                    for (i, (&d, &h)) in dout.iter().zip(xhat).enumerate() {
                        gg[i % c] = gg[i % c] + d * h;
                    }
                });
            }
            if nodes[*beta].requires_grad {
                accum_with(adj, *beta, c, |gb| {
                    for (i, &d) in dout.iter().enumerate() {
                        gb[i % c] = gb[i % c] + d;
                    }
                });
            }
            if nodes[*a].requires_grad {
                let inv_c = T::one() / T::from_usize(c).unwrap();
                let mut g = vec![T::zero(); dout.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let range = r * c..(r + 1) * c;
                    let dh: Vec<T> = dout[range.clone()].iter().zip(gv.data()).map(|(&d, &w)| d * w).collect();
                    let h = &xhat[range.clone()];
                    let mean_dh = dh.iter().copied().sum::<T>() * inv_c;
                    let mean_dhh = dh.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>() * inv_c;
                    for j in 0..c {
                        g[r * c + j] = rs * (dh[j] - mean_dh - h[j] * mean_dhh);
                    }
                }
                accum(adj, *a, g);
            }
        }
        _ => unreachable!(),
    }
}
