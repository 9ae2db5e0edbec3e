use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{Graph, Op, Var};
use crate::tensor::{numel, split_axis, Tensor};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `data` (laid out as `shape`) into the axis order `perm`.
fn permute_data<T: Float>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let rank = shape.len();
    // When the innermost axis stays innermost, copy whole rows at a time.
    let run = if rank > 0 && perm[rank - 1] == rank - 1 {
        shape[rank - 1]
    } else {
        1
    };
    let outer_rank = if run > 1 { rank - 1 } else { rank };
    let out_shape: Vec<usize> = perm[..outer_rank].iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm[..outer_rank].iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; outer_rank];
    let mut src = 0usize;
    for _ in 0..data.len() / run {
        out.extend_from_slice(&data[src..src + run]);
        for d in (0..outer_rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl<T: Float> Graph<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().with_grad(false).reshaped(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {}", shape.len()),
            });
        }
        let data = permute_data(self.value(x).data(), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let t = Tensor::new(&out_shape, data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            t,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::Axis {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        if start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{} exceeds axis size {}", start + len, shape[axis]),
            });
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(&out_shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Slice { x, axis, start }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let v = self.value(p).data();
                out.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let t = Tensor::new(&out_shape, out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Repeats `x` along a new leading axis of size `n`.
    pub fn expand_leading(&mut self, x: Var, n: usize) -> Var {
        let v = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(v.shape());
        let mut data = Vec::with_capacity(n * v.len());
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        let t = Tensor::new(&shape, data).expect("shape");
        let rg = self.any_grad(&[x]);
        self.push(t, Op::ExpandLeading { x }, rg)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "reduce",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &xv[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *dst += v;
                }
            }
        }
        if mean {
            let s = T::one() / T::lit(len as f64);
            for v in &mut out {
                *v *= s;
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let t = Tensor::new(&out_shape, out)?;
        let rg = self.any_grad(&[x]);
        let op = if mean {
            Op::MeanAxis { x, axis }
        } else {
            Op::SumAxis { x, axis }
        };
        Ok(self.push(t, op, rg))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::lit(v.len().max(1) as f64);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }
}

pub(crate) fn backward_permute<T: Float>(
    g: &Graph<T>,
    x: Var,
    perm: &[usize],
    grad: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    g.accumulate(grads, x, || permute_data(grad.data(), grad.shape(), &inverse_perm(perm)));
}

pub(crate) fn backward_slice<T: Float>(
    g: &Graph<T>,
    x: Var,
    axis: usize,
    start: usize,
    grad: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let shape = g.shape(x);
    let (outer, full, inner) = split_axis(shape, axis);
    let len = grad.shape()[axis];
    g.accumulate(grads, x, || {
        let mut dx = vec![T::zero(); numel(shape)];
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            dx[base..base + len * inner]
                .copy_from_slice(&grad.data()[o * len * inner..(o + 1) * len * inner]);
        }
        dx
    });
}

pub(crate) fn backward_concat<T: Float>(
    g: &Graph<T>,
    parts: &[Var],
    axis: usize,
    grad: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let (outer, total, inner) = split_axis(grad.shape(), axis);
    let mut offset = 0;
    for &p in parts {
        let len = g.shape(p)[axis];
        g.accumulate(grads, p, || {
            let mut d = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * total + offset) * inner;
                d.extend_from_slice(&grad.data()[base..base + len * inner]);
            }
            d
        });
        offset += len;
    }
}

pub(crate) fn backward_expand_leading<T: Float>(
    g: &Graph<T>,
    x: Var,
    grad: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let n = g.value(x).len();
    g.accumulate(grads, x, || {
        let mut acc = vec![T::zero(); n];
        for chunk in grad.data().chunks(n) {
            for (a, &v) in acc.iter_mut().zip(chunk) {
                *a += v;
            }
        }
        acc
    });
}

pub(crate) fn backward_reduce_axis<T: Float>(
    g: &Graph<T>,
    x: Var,
    axis: usize,
    scale: T,
    grad: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let shape = g.shape(x);
    let (outer, len, inner) = split_axis(shape, axis);
    g.accumulate(grads, x, || {
        let mut dx = Vec::with_capacity(numel(shape));
        for o in 0..outer {
            let row = &grad.data()[o * inner..(o + 1) * inner];
            for _ in 0..len {
                dx.extend(row.iter().map(|&v| v * scale));
            }
        }
        dx
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_manual_transpose() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = g.transpose(x).unwrap();
        assert_eq!(g.shape(y), &[3, 2]);
        assert_eq!(g.value(y).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn permute_rejects_duplicates() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.permute(x, &[0, 0]).is_err());
    }

    #[test]
    fn slice_and_concat_roundtrip() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[2, 4, 3], &data).unwrap());
        let a = g.slice(x, 1, 0, 1).unwrap();
        let b = g.slice(x, 1, 1, 3).unwrap();
        let y = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(y), g.value(x));
        assert!(g.slice(x, 1, 2, 3).is_err());
    }

    #[test]
    fn mean_axis_last() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 3.0, 5.0, 9.0]).unwrap());
        let y = g.mean_axis(x, 1).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 7.0]);
    }
}
