use crate::error::{dim_err, NumericsError, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Which GELU formula an op evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GeluKind {
    /// `0.5 x (1 + tanh(√(2/π) (x + 0.044715 x³)))`
    #[default]
    Tanh,
}

const GELU_COEF: f64 = 0.044_715;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::of(GELU_COEF) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::of(GELU_COEF) * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0 * GELU_COEF) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}

impl<'a, T: Scalar> Tape<'a, T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err(op, sa, sb));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push_op(out, shape, &[a, b], |args| {
            let g = args.grad;
            vec![args.needs[0].then(|| g.to_vec()), args.needs[1].then(|| g.to_vec())]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        Ok(self.push_op(out, shape, &[a, b], |args| {
            let g = args.grad;
            vec![args.needs[0].then(|| g.to_vec()), args.needs[1].then(|| g.iter().map(|&v| -v).collect())]
        }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push_op(out, shape, &[a, b], |args| {
            let (g, av, bv) = (args.grad, args.inputs[0], args.inputs[1]);
            vec![
                args.needs[0].then(|| g.iter().zip(bv).map(|(&g, &y)| g * y).collect()),
                args.needs[1].then(|| g.iter().zip(av).map(|(&g, &x)| g * x).collect()),
            ]
        }))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(out, shape, &[a], move |args| vec![Some(args.grad.iter().map(|&g| g * c).collect())]))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias and
    /// positional-table broadcasts).
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(dim_err("add_bcast", &sa, &sb));
        }
        let inner: usize = sb.iter().product();
        let bv = self.value(b);
        let out = self.value(a).iter().enumerate().map(|(i, &x)| x + bv[i % inner.max(1)]).collect();
        Ok(self.push_op(out, sa, &[a, b], move |args| {
            let g = args.grad;
            let db = args.needs[1].then(|| {
                let mut d = vec![T::zero(); inner];
                for chunk in g.chunks(inner.max(1)) {
                    d.iter_mut().zip(chunk).for_each(|(d, &v)| *d += v);
                }
                d
            });
            vec![args.needs[0].then(|| g.to_vec()), db]
        }))
    }

    /// Multiplies every element of `a` by the one-element value `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(dim_err("mul_scalar", self.shape(a), self.shape(s)));
        }
        let sv = self.value(s)[0];
        let out = self.value(a).iter().map(|&x| x * sv).collect();
        let shape = self.shape(a).to_vec();
        let s_shape_len = self.value(s).len();
        Ok(self.push_op(out, shape, &[a, s], move |args| {
            let (g, av) = (args.grad, args.inputs[0]);
            let sv = args.inputs[1][0];
            vec![
                args.needs[0].then(|| g.iter().map(|&g| g * sv).collect()),
                args.needs[1].then(|| {
                    let mut d = vec![T::zero(); s_shape_len];
                    d[0] = g.iter().zip(av).map(|(&g, &x)| g * x).sum();
                    d
                }),
            ]
        }))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(out, shape, &[a], |args| {
            vec![Some(args.grad.iter().zip(args.output).map(|(&g, &y)| g * y).collect())]
        }))
    }

    pub fn gelu(&mut self, a: Var, kind: GeluKind) -> Result<Var> {
        let GeluKind::Tanh = kind;
        let out = self.value(a).iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(out, shape, &[a], |args| {
            vec![Some(args.grad.iter().zip(args.inputs[0]).map(|(&g, &x)| g * gelu_grad(x)).collect())]
        }))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x.max(T::zero())).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(out, shape, &[a], |args| {
            vec![Some(
                args.grad
                    .iter()
                    .zip(args.inputs[0])
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect(),
            )]
        }))
    }

    /// Sum of all elements, as a rank-0 value.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).iter().copied().sum();
        let n = self.value(a).len();
        Ok(self.push_op(vec![total], vec![], &[a], move |args| vec![Some(vec![args.grad[0]; n])]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(NumericsError::Contract("mean of an empty value".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_matches_reference_points() {
        assert_eq!(gelu_fwd(0.0f64), 0.0);
        // large positive inputs pass through, large negative vanish
        assert!((gelu_fwd(10.0f64) - 10.0).abs() < 1e-12);
        assert!(gelu_fwd(-10.0f64).abs() < 1e-12);
        assert!((gelu_fwd(1.0f64) - 0.841_191_990_608_276_8).abs() < 1e-12);
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-2.5f64, -0.3, 0.0, 0.7, 1.9] {
            let h = 1e-6;
            let fd = (gelu_fwd(x + h) - gelu_fwd(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}
