use crate::error::{Result, TensorError};
use crate::float::{gemm, Float};
use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;

impl<T: Float> Graph<T> {
    /// `a[..., k] · b[k, n] -> [..., n]`; leading dimensions of `a` are
    /// flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, T::zero());
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(&shape, out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// Batched product `a[b, m, k] · b[b, k, n]`, or `a · bᵀ` with
    /// `b[b, n, k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || TensorError::Shape {
            op: "bmm",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &va[i * m * k..(i + 1) * m * k],
                false,
                &vb[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                T::zero(),
            );
        }
        let t = Tensor::new(&[batch, m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Bmm { a, b, trans_b }, rg))
    }

    /// Same-padding 2-D cross-correlation.
    ///
    /// `x` is `[B, H, W, Cin]` (or `[H, W, Cin]`), `w` is `[k, k, Cin, Cout]`
    /// with odd `k`, optional bias `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (batch, h, wd, cin) = match sx.len() {
            3 => (1, sx[0], sx[1], sx[2]),
            4 => (sx[0], sx[1], sx[2], sx[3]),
            _ => {
                return Err(TensorError::Shape {
                    op: "conv2d",
                    lhs: sx,
                    rhs: sw,
                })
            }
        };
        if sw.len() != 4 || sw[0] != sw[1] || sw[2] != cin {
            return Err(TensorError::Shape {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let k = sw[0];
        if k % 2 == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("same padding needs an odd kernel, got {k}"),
            });
        }
        let cout = sw[3];
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(TensorError::Shape {
                    op: "conv2d bias",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![cout],
                });
            }
        }
        let cols = im2col(self.value(x).data(), batch, h, wd, cin, k);
        let rows = batch * h * wd;
        let mut out = vec![T::zero(); rows * cout];
        gemm(rows, k * k * cin, cout, &cols, false, self.value(w).data(), false, &mut out, T::zero());
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(cout) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = cout;
        let t = Tensor::new(&shape, out)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        let rg = self.any_grad(&parents);
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b: bias,
                kernel: k,
                cols,
            },
            rg,
        ))
    }
}

fn im2col<T: Float>(x: &[T], batch: usize, h: usize, w: usize, cin: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let width = k * k * cin;
    let mut cols = vec![T::zero(); batch * h * w * width];
    for b in 0..batch {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * width;
                for dy in 0..k {
                    let sy = y as isize + dy as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let sx = xx as isize + dx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((b * h + sy as usize) * w + sx as usize) * cin;
                        let dst = row + (dy * k + dx) * cin;
                        cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Float>(cols: &[T], batch: usize, h: usize, w: usize, cin: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let width = k * k * cin;
    let mut x = vec![T::zero(); batch * h * w * cin];
    for b in 0..batch {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * width;
                for dy in 0..k {
                    let sy = y as isize + dy as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let sx = xx as isize + dx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + sy as usize) * w + sx as usize) * cin;
                        let src = row + (dy * k + dx) * cin;
                        for c in 0..cin {
                            x[dst + c] += cols[src + c];
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn backward_matmul<T: Float>(
    g: &Graph<T>,
    a: Var,
    b: Var,
    grad: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let sb = g.shape(b);
    let (k, n) = (sb[0], sb[1]);
    let m = g.value(a).len() / k.max(1);
    let (va, vb) = (g.value(a).data(), g.value(b).data());
    g.accumulate(grads, a, || {
        let mut da = vec![T::zero(); m * k];
        gemm(m, n, k, grad.data(), false, vb, true, &mut da, T::zero());
        da
    });
    g.accumulate(grads, b, || {
        let mut db = vec![T::zero(); k * n];
        gemm(k, m, n, va, true, grad.data(), false, &mut db, T::zero());
        db
    });
}

pub(crate) fn backward_bmm<T: Float>(
    g: &Graph<T>,
    a: Var,
    b: Var,
    trans_b: bool,
    grad: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let sa = g.shape(a);
    let (batch, m, k) = (sa[0], sa[1], sa[2]);
    let n = grad.shape()[2];
    let (va, vb, gd) = (g.value(a).data(), g.value(b).data(), grad.data());
    g.accumulate(grads, a, || {
        let mut da = vec![T::zero(); batch * m * k];
        for i in 0..batch {
            let gi = &gd[i * m * n..(i + 1) * m * n];
            let bi = &vb[i * k * n..(i + 1) * k * n];
            // trans_b stores b as [n, k]; otherwise [k, n] and we need its transpose
            gemm(m, n, k, gi, false, bi, !trans_b, &mut da[i * m * k..(i + 1) * m * k], T::zero());
        }
        da
    });
    g.accumulate(grads, b, || {
        let mut db = vec![T::zero(); batch * k * n];
        for i in 0..batch {
            let gi = &gd[i * m * n..(i + 1) * m * n];
            let ai = &va[i * m * k..(i + 1) * m * k];
            let dbi = &mut db[i * k * n..(i + 1) * k * n];
            if trans_b {
                gemm(n, m, k, gi, true, ai, false, dbi, T::zero());
            } else {
                gemm(k, m, n, ai, true, gi, false, dbi, T::zero());
            }
        }
        db
    });
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_conv2d<T: Float>(
    g: &Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    k: usize,
    cols: &[T],
    grad: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let sx = g.shape(x);
    let (batch, h, wd, cin) = match sx.len() {
        3 => (1, sx[0], sx[1], sx[2]),
        _ => (sx[0], sx[1], sx[2], sx[3]),
    };
    let cout = g.shape(w)[3];
    let rows = batch * h * wd;
    let width = k * k * cin;
    g.accumulate(grads, w, || {
        let mut dw = vec![T::zero(); width * cout];
        gemm(width, rows, cout, cols, true, grad.data(), false, &mut dw, T::zero());
        dw
    });
    if let Some(b) = b {
        g.accumulate(grads, b, || {
            let mut db = vec![T::zero(); cout];
            for row in grad.data().chunks(cout) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            db
        });
    }
    let vw = g.value(w).data();
    g.accumulate(grads, x, || {
        let mut dcols = vec![T::zero(); rows * width];
        gemm(rows, cout, width, grad.data(), false, vw, true, &mut dcols, T::zero());
        col2im(&dcols, batch, h, wd, cin, k)
    });
}
