use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::real::Real;
use crate::tensor::Tensor;

use super::same_shape;

struct AddOp;

impl<T: Real> Op<T> for AddOp {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, wants: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(wants.iter().map(|&w| w.then(|| g.clone())).collect())
    }
}

struct ScaleOp<T>(T);

impl<T: Real> Op<T> for ScaleOp<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(g.map(|v| v * self.0))])
    }
}

struct MulOp;

impl<T: Real> Op<T> for MulOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, wants: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let prod = |other: &Tensor<T>| {
            let mut out = g.clone();
            for (o, &b) in out.data_mut().iter_mut().zip(other.data()) {
                *o *= b;
            }
            out
        };
        Ok(vec![wants[0].then(|| prod(x[1])), wants[1].then(|| prod(x[0]))])
    }
}

#[derive(Clone, Copy)]
enum Unary {
    Relu,
    Silu,
}

struct UnaryOp(Unary);

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Op<T> for UnaryOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let mut out = g.clone();
        let xs = x[0].data();
        match self.0 {
            Unary::Relu => {
                for (o, &v) in out.data_mut().iter_mut().zip(xs) {
                    if v <= T::zero() {
                        *o = T::zero();
                    }
                }
            }
            Unary::Silu => {
                for (o, &v) in out.data_mut().iter_mut().zip(xs) {
                    let s = sigmoid(v);
                    *o *= s * (T::one() + v * (T::one() - s));
                }
            }
        }
        Ok(vec![Some(out)])
    }
}

/// GELU with the local derivative stored at forward time, sparing a second
/// `erf` evaluation per element in the backward sweep.
struct GeluOp<T> {
    slope: Vec<T>,
}

impl<T: Real> Op<T> for GeluOp<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let mut out = g.clone();
        for (o, &s) in out.data_mut().iter_mut().zip(&self.slope) {
            *o *= s;
        }
        Ok(vec![Some(out)])
    }
}

struct MeanOp {
    shape: Vec<usize>,
}

impl<T: Real> Op<T> for MeanOp {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let n: usize = self.shape.iter().product();
        Ok(vec![Some(Tensor::full(&self.shape, g.item() / T::from_usize(n.max(1)).unwrap()))])
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, &[a, b], AddOp))
    }

    /// Sum of several equally shaped values.
    pub fn sum_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars.split_first().ok_or_else(|| TensorError::invalid("sum_all", "no inputs"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let out = self.value(a).map(|v| v * s);
        self.push(out, &[a], ScaleOp(s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let out = self.value(a).map(|v| v + s);
        self.push(out, &[a], ScaleOp(T::one()))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        Ok(self.push(out, &[a, b], MulOp))
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let out = match kind {
            Unary::Relu => self.value(a).map(|v| v.max(T::zero())),
            Unary::Silu => self.value(a).map(|v| v * sigmoid(v)),
        };
        self.push(out, &[a], UnaryOp(kind))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let xs = self.value(a);
        let mut out = Vec::with_capacity(xs.len());
        let mut slope = Vec::with_capacity(if self.grad_enabled() { xs.len() } else { 0 });
        for &x in xs.data() {
            let (cdf, pdf) = x.gelu_parts();
            out.push(x * cdf);
            if self.grad_enabled() {
                slope.push(cdf + x * pdf);
            }
        }
        let out = Tensor::from_vec(xs.shape(), out).expect("same length");
        self.push(out, &[a], GeluOp { slope })
    }

    /// Mean over all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, &[a], MeanOp { shape })
    }
}
