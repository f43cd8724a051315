//! 2-D convolution (cross-correlation) with "same" padding via im2col + gemm.

use crate::error::shape_err;
use crate::graph::{accum_with, Node, Op};
use crate::{Element, Result, Tensor, Var};

#[derive(Clone, Copy, Debug)]
struct Dims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Dims {
    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn dims(x: &[usize], w: &[usize], stride: usize) -> Result<Dims> {
    if x.len() != 4 || w.len() != 4 || w[2] != w[3] || w[2] % 2 == 0 || x[1] != w[1] || stride == 0 {
        return Err(shape_err(
            "conv2d",
            format!("input {x:?}, kernel {w:?}, stride {stride}"),
        ));
    }
    let k = w[2];
    let pad = k / 2;
    let ho = (x[2] + 2 * pad - k) / stride + 1;
    let wo = (x[3] + 2 * pad - k) / stride + 1;
    Ok(Dims {
        batch: x[0],
        cin: x[1],
        h: x[2],
        w: x[3],
        cout: w[0],
        k,
        stride,
        pad,
        ho,
        wo,
    })
}

fn im2col<T: Element>(d: &Dims, x: &[T], cols: &mut [T]) {
    let n = d.col_cols();
    for c in 0..d.cin {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (c * d.k + ki) * d.k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..d.ho {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    let drow = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in drow.iter_mut().enumerate() {
                        let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                        *v = if ix < 0 || ix >= d.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(d: &Dims, cols: &[T], dx: &mut [T]) {
    let n = d.col_cols();
    for c in 0..d.cin {
        let plane = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (c * d.k + ki) * d.k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..d.ho {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.wo {
                        let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<'g, T: Element> Var<'g, T> {
    /// Cross-correlation of `[B, C, H, W]` with kernel `[O, C, k, k]` (odd `k`),
    /// zero padding `k / 2`, optional bias `[O]`.
    pub fn conv2d(self, kernel: Var<'g, T>, bias: Option<Var<'g, T>>, stride: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let w = kernel.value();
        let d = dims(x.shape(), w.shape(), stride)?;
        let b = bias.map(|b| b.value());
        if let Some(b) = &b {
            if b.shape() != [d.cout] {
                return Err(shape_err("conv2d", format!("bias {:?} for {} outputs", b.shape(), d.cout)));
            }
        }
        let keep_cols = kernel.requires_grad();
        let (rows, n) = (d.col_rows(), d.col_cols());
        let mut cols = vec![T::zero(); if keep_cols { d.batch * rows * n } else { rows * n }];
        let mut out = vec![T::zero(); d.batch * d.cout * n];
        for bi in 0..d.batch {
            let xb = &x.data()[bi * d.cin * d.h * d.w..(bi + 1) * d.cin * d.h * d.w];
            let cb = if keep_cols {
                &mut cols[bi * rows * n..(bi + 1) * rows * n]
            } else {
                &mut cols[..]
            };
            im2col(&d, xb, cb);
            let ob = &mut out[bi * d.cout * n..(bi + 1) * d.cout * n];
            if let Some(b) = &b {
                for (o, chunk) in ob.chunks_mut(n).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = b.data()[o]);
                }
            }
            T::gemm(
                d.cout,
                rows,
                n,
                w.data(),
                (rows as isize, 1),
                cb,
                (n as isize, 1),
                ob,
                (n as isize, 1),
                b.is_some(),
            );
        }
        if !keep_cols {
            cols = Vec::new();
        }
        let t = Tensor::from_vec(vec![d.batch, d.cout, d.ho, d.wo], out)?;
        self.g.push(
            "conv2d",
            t,
            Op::Conv2d {
                x: self.id,
                w: kernel.id,
                b: bias.map(|b| b.id),
                stride,
                cols,
            },
        )
    }
}

pub(crate) fn backward<T: Element>(nodes: &[Node<T>], id: usize, dout: &[T], adj: &mut [Option<Vec<T>>]) {
    let Op::Conv2d { x, w, b, stride, cols } = &nodes[id].op else {
        unreachable!()
    };
    let xv = &*nodes[*x].value;
    let wv = &*nodes[*w].value;
    let d = dims(xv.shape(), wv.shape(), *stride).expect("validated in forward");
    let (rows, n) = (d.col_rows(), d.col_cols());
    if let Some(b) = b {
        if nodes[*b].requires_grad {
            accum_with(adj, *b, d.cout, |gb| {
                for bi in 0..d.batch {
                    for o in 0..d.cout {
                        let s: T = dout[(bi * d.cout + o) * n..(bi * d.cout + o + 1) * n].iter().copied().sum();
                        gb[o] = gb[o] + s;
                    }
                }
            });
        }
    }
    if nodes[*w].requires_grad {
        accum_with(adj, *w, d.cout * rows, |gw| {
            for bi in 0..d.batch {
                let db = &dout[bi * d.cout * n..(bi + 1) * d.cout * n];
                let cb = &cols[bi * rows * n..(bi + 1) * rows * n];
                // gw[O, rows] += dout_b[O, n] · cols_bᵀ
                T::gemm(d.cout, n, rows, db, (n as isize, 1), cb, (1, n as isize), gw, (rows as isize, 1), true);
            }
        });
    }
    if nodes[*x].requires_grad {
        let mut dcols = vec![T::zero(); rows * n];
        accum_with(adj, *x, xv.numel(), |gx| {
            for bi in 0..d.batch {
                let db = &dout[bi * d.cout * n..(bi + 1) * d.cout * n];
                // dcols[rows, n] = wᵀ[rows, O] · dout_b[O, n]
                T::gemm(rows, d.cout, n, wv.data(), (1, rows as isize), db, (n as isize, 1), &mut dcols, (n as isize, 1), false);
                col2im(&d, &dcols, &mut gx[bi * d.cin * d.h * d.w..(bi + 1) * d.cin * d.h * d.w]);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use crate::{Graph, Tensor};

    #[test]
    fn one_hot_input_stamps_flipped_kernel() {
        // Cross-correlation: out[y, x] = Σ k[i, j] · in[y + i - 1, x + j - 1], so an
        // impulse at (2, 2) yields out[2 - (i - 1), 2 - (j - 1)] = k[i, j].
        let g = Graph::<f64>::new();
        let mut x = Tensor::zeros(&[1, 1, 5, 5]);
        x.data_mut()[2 * 5 + 2] = 1.0;
        let k: Vec<f64> = (1..=9).map(f64::from).collect();
        let w = g.constant(Tensor::from_vec(vec![1, 1, 3, 3], k).unwrap());
        let y = g.constant(x).conv2d(w, None, 1).unwrap().value();
        #[rustfmt::skip]
        let expected = [
            0., 0., 0., 0., 0.,
            0., 9., 8., 7., 0.,
            0., 6., 5., 4., 0.,
            0., 3., 2., 1., 0.,
            0., 0., 0., 0., 0.,
        ];
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        assert_eq!(y.data(), &expected);
    }

    #[test]
    fn corner_impulse_is_clipped_by_zero_padding() {
        let g = Graph::<f64>::new();
        let mut x = Tensor::zeros(&[1, 1, 5, 5]);
        x.data_mut()[0] = 1.0;
        let w = g.constant(Tensor::from_vec(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap());
        let y = g.constant(x).conv2d(w, None, 1).unwrap().value();
        assert_eq!(y.data()[0], 5.0);
        assert_eq!(y.data()[1], 4.0);
        assert_eq!(y.data()[5], 2.0);
        assert_eq!(y.data()[6], 1.0);
        assert_eq!(y.data().iter().filter(|&&v| v != 0.0).count(), 4);
    }

    #[test]
    fn stride_two_halves_the_grid_and_bias_is_added() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 8, 8]));
        let w = g.constant(Tensor::full(&[4, 3, 3, 3], 1.0));
        let b = g.constant(Tensor::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = x.conv2d(w, Some(b), 2).unwrap().value();
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
        assert_eq!(y.data()[16], 2.0);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(x.conv2d(w, None, 1).is_err());
    }
}
