use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;

pub(crate) fn sigmoid_scalar<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub(crate) fn softplus_scalar<T: Float>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

// tanh approximation of GELU, written as x·σ(2u) with
// u = √(2/π)(x + 0.044715x³); same function, one exp per element.
fn gelu_sigma<T: Float>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let u = c * (x + k * x * x * x);
    T::one() / (T::one() + (-(u + u)).exp())
}

pub(crate) fn gelu_scalar<T: Float>(x: T) -> T {
    x * gelu_sigma(x)
}

pub(crate) fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k3 = T::lit(3.0 * 0.044715);
    let s = gelu_sigma(x);
    s + T::lit(2.0) * x * s * (T::one() - s) * c * (T::one() + k3 * x * x)
}

fn trailing_bcast(op: &'static str, x: &[usize], b: &[usize]) -> Result<()> {
    if b.len() > x.len() || x[x.len() - b.len()..] != *b {
        return Err(TensorError::Shape {
            op,
            lhs: x.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

impl<T: Float> Graph<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape(), data).expect("same shape");
        let rg = self.any_grad(&[a, b]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `x + b` where `b`'s shape equals the trailing dimensions of `x`.
    pub fn add_bcast(&mut self, x: Var, b: Var) -> Result<Var> {
        trailing_bcast("add_bcast", self.shape(x), self.shape(b))?;
        let vb = self.value(b).data();
        let n = vb.len();
        let vx = self.value(x);
        let data = vx
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(vb).map(|(&v, &w)| v + w))
            .collect();
        let t = Tensor::new(vx.shape(), data).expect("shape");
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(t, Op::AddBcast(x, b), rg))
    }

    /// `x * s` where `s`'s shape equals the trailing dimensions of `x`.
    pub fn mul_bcast(&mut self, x: Var, s: Var) -> Result<Var> {
        trailing_bcast("mul_bcast", self.shape(x), self.shape(s))?;
        let vs = self.value(s).data();
        let n = vs.len();
        let vx = self.value(x);
        let data = vx
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(vs).map(|(&v, &w)| v * w))
            .collect();
        let t = Tensor::new(vx.shape(), data).expect("shape");
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(t, Op::MulBcast(x, s), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v + c);
        let rg = self.any_grad(&[x]);
        self.push(t, Op::AddConst(x), rg)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let t = self.value(x).map(f);
        let rg = self.any_grad(&[x]);
        self.push(t, op, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), gelu_scalar)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid_scalar)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(T::zero()))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus_scalar)
    }
}

pub(crate) fn backward_unary<T: Float>(
    g: &Graph<T>,
    x: Var,
    grad: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
    deriv: impl Fn(T) -> T,
) {
    let xv = g.value(x).data();
    g.accumulate(grads, x, || {
        grad.data()
            .iter()
            .zip(xv)
            .map(|(&gv, &v)| gv * deriv(v))
            .collect()
    });
}

pub(crate) fn backward_mul<T: Float>(
    g: &Graph<T>,
    a: Var,
    b: Var,
    grad: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let (va, vb) = (g.value(a).data(), g.value(b).data());
    g.accumulate(grads, a, || grad.data().iter().zip(vb).map(|(&gv, &y)| gv * y).collect());
    g.accumulate(grads, b, || grad.data().iter().zip(va).map(|(&gv, &x)| gv * x).collect());
}

pub(crate) fn backward_add_bcast<T: Float>(
    g: &Graph<T>,
    x: Var,
    b: Var,
    grad: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    g.accumulate(grads, x, || grad.data().to_vec());
    let n = g.value(b).len();
    g.accumulate(grads, b, || {
        let mut acc = vec![T::zero(); n];
        for chunk in grad.data().chunks(n) {
            for (a, &v) in acc.iter_mut().zip(chunk) {
                *a += v;
            }
        }
        acc
    });
}

pub(crate) fn backward_mul_bcast<T: Float>(
    g: &Graph<T>,
    x: Var,
    s: Var,
    grad: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let vs = g.value(s).data();
    let n = vs.len();
    g.accumulate(grads, x, || {
        grad.data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(vs).map(|(&gv, &w)| gv * w))
            .collect()
    });
    let vx = g.value(x).data();
    g.accumulate(grads, s, || {
        let mut acc = vec![T::zero(); n];
        for (gc, xc) in grad.data().chunks(n).zip(vx.chunks(n)) {
            for ((a, &gv), &xv) in acc.iter_mut().zip(gc).zip(xc) {
                *a += gv * xv;
            }
        }
        acc
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn square_derivative() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_abs_diff_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        let grads = g.backward(y).unwrap();
        assert_abs_diff_eq!(g.value(y).item(), 0.5);
        assert_abs_diff_eq!(grads.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn softplus_is_stable() {
        assert_abs_diff_eq!(softplus_scalar(1000.0f64), 1000.0);
        assert!(softplus_scalar(-1000.0f64) >= 0.0);
        assert_abs_diff_eq!(softplus_scalar(0.0f64), 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn broadcast_rejects_non_suffix() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(g.add_bcast(x, b).is_err());
    }
}
