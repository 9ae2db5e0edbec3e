use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;

/// Spatial pooling applied per channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PoolKind {
    /// Global average pooling.
    Gap,
    /// Global max pooling; ties resolve to the first position.
    Gmp,
    /// Global weighted rank pooling: values sorted descending and weighted
    /// by `decay^rank`, normalized by the weight sum.
    Gwrp { decay: f64 },
}

impl PoolKind {
    pub fn validate(&self) -> Result<()> {
        if let PoolKind::Gwrp { decay } = *self {
            if !(decay > 0.0 && decay <= 1.0) {
                return Err(TensorError::Invalid {
                    op: "pool",
                    msg: format!("GWRP decay must lie in (0, 1], got {decay}"),
                });
            }
        }
        Ok(())
    }
}

impl<T: Float> Graph<T> {
    /// Pools `[B, H, W, C]` (or `[H, W, C]`) to `[B, C]` (or `[C]`).
    pub fn pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        kind.validate()?;
        let shape = self.shape(x).to_vec();
        let (batch, hw, c, out_shape) = match shape.len() {
            3 => (1, shape[0] * shape[1], shape[2], vec![shape[2]]),
            4 => (shape[0], shape[1] * shape[2], shape[3], vec![shape[0], shape[3]]),
            _ => {
                return Err(TensorError::Invalid {
                    op: "pool",
                    msg: format!("expected [B,H,W,C] or [H,W,C], got {shape:?}"),
                })
            }
        };
        if hw == 0 {
            return Err(TensorError::Invalid {
                op: "pool",
                msg: "empty spatial extent".into(),
            });
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(batch * c);
        let mut weights = Vec::new();
        let mut column = Vec::with_capacity(hw);
        let rank_weights: Vec<T> = match kind {
            PoolKind::Gwrp { decay } => {
                let raw: Vec<f64> = (0..hw).map(|j| decay.powi(j as i32)).collect();
                let total: f64 = raw.iter().sum();
                raw.iter().map(|w| T::lit(w / total)).collect()
            }
            _ => Vec::new(),
        };
        for b in 0..batch {
            for ch in 0..c {
                column.clear();
                column.extend((0..hw).map(|p| (b * hw + p) * c + ch));
                match kind {
                    PoolKind::Gap => {
                        let w = T::one() / T::lit(hw as f64);
                        let mut acc = T::zero();
                        for &idx in &column {
                            acc += xv[idx];
                            weights.push((idx, w));
                        }
                        out.push(acc * w);
                    }
                    PoolKind::Gmp => {
                        let mut best = column[0];
                        for &idx in &column[1..] {
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                        weights.push((best, T::one()));
                        out.push(xv[best]);
                    }
                    PoolKind::Gwrp { .. } => {
                        // stable sort keeps row-major order among equal values
                        column.sort_by(|&i, &j| {
                            xv[j].partial_cmp(&xv[i]).unwrap_or(std::cmp::Ordering::Equal)
                        });
                        let mut acc = T::zero();
                        for (&idx, &w) in column.iter().zip(&rank_weights) {
                            acc += xv[idx] * w;
                            weights.push((idx, w));
                        }
                        out.push(acc);
                    }
                }
            }
        }
        let t = Tensor::new(&out_shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Pool { x, weights }, rg))
    }
}

pub(crate) fn backward_pool<T: Float>(
    g: &Graph<T>,
    x: Var,
    weights: &[(usize, T)],
    grad: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let per_out = weights.len() / grad.len().max(1);
    let n = g.value(x).len();
    g.accumulate(grads, x, || {
        let mut dx = vec![T::zero(); n];
        for (i, &(idx, w)) in weights.iter().enumerate() {
            dx[idx] += grad.data()[i / per_out] * w;
        }
        dx
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pooled(shape: &[usize], data: &[f64], kind: PoolKind) -> Vec<f64> {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(shape, data).unwrap());
        let y = g.pool(x, kind).unwrap();
        g.value(y).data().to_vec()
    }

    #[test]
    fn constant_field_is_fixed_point() {
        for kind in [PoolKind::Gap, PoolKind::Gmp, PoolKind::Gwrp { decay: 0.9 }] {
            let v = pooled(&[3, 3, 1], &[2.5; 9], kind);
            assert_abs_diff_eq!(v[0], 2.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn gmp_picks_max() {
        assert_eq!(pooled(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0], PoolKind::Gmp), vec![4.0]);
    }

    #[test]
    fn gwrp_closed_form() {
        let v = pooled(&[2, 2, 1], &[1.0, 3.0, 4.0, 2.0], PoolKind::Gwrp { decay: 0.5 });
        assert_abs_diff_eq!(v[0], (4.0 + 1.5 + 0.5 + 0.125) / 1.875, epsilon = 1e-12);
        assert_abs_diff_eq!(v[0], 3.266_666_666_666_667, epsilon = 1e-12);
    }

    #[test]
    fn gwrp_rejects_bad_decay() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 2, 1]));
        assert!(g.pool(x, PoolKind::Gwrp { decay: 0.0 }).is_err());
        assert!(g.pool(x, PoolKind::Gwrp { decay: 1.5 }).is_err());
        assert!(g.pool(x, PoolKind::Gwrp { decay: 1.0 }).is_ok());
    }

    #[test]
    fn gmp_gradient_routes_to_argmax() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[1, 2, 2, 1], &[1.0, 5.0, 5.0, 2.0]).unwrap());
        let y = g.pool(x, PoolKind::Gmp).unwrap();
        let s = g.sum_all(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
