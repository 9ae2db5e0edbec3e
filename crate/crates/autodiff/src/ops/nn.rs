use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{Graph, Op, Var};
use crate::tensor::{split_axis, Tensor};

const L2_EPS: f64 = 1e-12;

impl<T: Float> Graph<T> {
    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        if inner == 1 && len > 0 {
            for (row, dst) in xv.chunks(len).zip(out.chunks_mut(len)) {
                let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let mut sum = T::zero();
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d = (v - mx).exp();
                    sum += *d;
                }
                let inv = T::one() / sum;
                dst.iter_mut().for_each(|d| *d *= inv);
            }
            let t = Tensor::new(&shape, out)?;
            let rg = self.any_grad(&[x]);
            return Ok(self.push(t, Op::Softmax { x, axis }, rg));
        }
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(xv[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (xv[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&len) = shape.last() else {
            return Err(TensorError::Axis {
                op: "log_softmax",
                axis: 0,
                rank: 0,
            });
        };
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for (row, o) in xv.chunks(len).zip(out.chunks_mut(len)) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            for (dst, &v) in o.iter_mut().zip(row) {
                *dst = v - lse;
            }
        }
        let t = Tensor::new(&shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::LogSoftmax { x }, rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::lit(eps);
        let inv_d = T::one() / T::lit(d as f64);
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d.max(1);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let t = Tensor::new(&shape, out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Scales each row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&1);
        let xv = self.value(x).data();
        let mut norms = Vec::with_capacity(xv.len() / d.max(1));
        let mut out = vec![T::zero(); xv.len()];
        for (row, o) in xv.chunks(d).zip(out.chunks_mut(d)) {
            let n = (row.iter().map(|&v| v * v).sum::<T>() + T::lit(L2_EPS)).sqrt();
            norms.push(n);
            for (dst, &v) in o.iter_mut().zip(row) {
                *dst = v / n;
            }
        }
        let t = Tensor::new(&shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::L2Normalize { x, norms }, rg))
    }
}

pub(crate) fn backward_softmax<T: Float>(
    g: &Graph<T>,
    x: Var,
    axis: usize,
    out: &Tensor<T>,
    grad: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let (outer, len, inner) = split_axis(out.shape(), axis);
    let (y, gd) = (out.data(), grad.data());
    g.accumulate(grads, x, || {
        let mut dx = vec![T::zero(); y.len()];
        if inner == 1 && len > 0 {
            for ((yr, gr), dr) in y.chunks(len).zip(gd.chunks(len)).zip(dx.chunks_mut(len)) {
                let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                for ((d, &p), &q) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = p * (q - dot);
                }
            }
            return dx;
        }
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut dot = T::zero();
                for j in 0..len {
                    dot += gd[base + j * inner] * y[base + j * inner];
                }
                for j in 0..len {
                    let idx = base + j * inner;
                    dx[idx] = y[idx] * (gd[idx] - dot);
                }
            }
        }
        dx
    });
}

pub(crate) fn backward_log_softmax<T: Float>(
    g: &Graph<T>,
    x: Var,
    out: &Tensor<T>,
    grad: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let len = *out.shape().last().unwrap();
    g.accumulate(grads, x, || {
        let mut dx = vec![T::zero(); out.len()];
        for ((y, gr), d) in out
            .data()
            .chunks(len)
            .zip(grad.data().chunks(len))
            .zip(dx.chunks_mut(len))
        {
            let gsum = gr.iter().copied().sum::<T>();
            for j in 0..len {
                d[j] = gr[j] - y[j].exp() * gsum;
            }
        }
        dx
    });
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_layer_norm<T: Float>(
    g: &Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    rstd: &[T],
    grad: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let d = g.shape(gamma)[0];
    let gd = grad.data();
    let gv = g.value(gamma).data();
    g.accumulate(grads, gamma, || {
        let mut acc = vec![T::zero(); d];
        for (gr, xh) in gd.chunks(d).zip(xhat.chunks(d)) {
            for j in 0..d {
                acc[j] += gr[j] * xh[j];
            }
        }
        acc
    });
    g.accumulate(grads, beta, || {
        let mut acc = vec![T::zero(); d];
        for gr in gd.chunks(d) {
            for j in 0..d {
                acc[j] += gr[j];
            }
        }
        acc
    });
    let inv_d = T::one() / T::lit(d as f64);
    g.accumulate(grads, x, || {
        let mut dx = vec![T::zero(); gd.len()];
        for (r, ((gr, xh), out)) in gd
            .chunks(d)
            .zip(xhat.chunks(d))
            .zip(dx.chunks_mut(d))
            .enumerate()
        {
            let mut mean_dh = T::zero();
            let mut mean_dh_xh = T::zero();
            for j in 0..d {
                let dh = gr[j] * gv[j];
                mean_dh += dh;
                mean_dh_xh += dh * xh[j];
            }
            mean_dh *= inv_d;
            mean_dh_xh *= inv_d;
            for j in 0..d {
                let dh = gr[j] * gv[j];
                out[j] = rstd[r] * (dh - mean_dh - xh[j] * mean_dh_xh);
            }
        }
        dx
    });
}

pub(crate) fn backward_l2_normalize<T: Float>(
    g: &Graph<T>,
    x: Var,
    norms: &[T],
    out: &Tensor<T>,
    grad: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let d = *out.shape().last().unwrap_or(&1);
    g.accumulate(grads, x, || {
        let mut dx = vec![T::zero(); out.len()];
        for (r, ((y, gr), o)) in out
            .data()
            .chunks(d)
            .zip(grad.data().chunks(d))
            .zip(dx.chunks_mut(d))
            .enumerate()
        {
            let dot = y.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
            for j in 0..d {
                o[j] = (gr[j] - y[j] * dot) / norms[r];
            }
        }
        dx
    });
}
