//! Central finite differences, the oracle for every analytic gradient.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i` of `x`.
pub fn finite_diff_grad<T: Scalar>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, h: f64) -> Tensor<T> {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let step = T::of(h);
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (step + step));
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape as x")
}

/// Largest elementwise `|a − n| / max(|a|, |n|, floor)` over two buffers.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic.iter().zip(numeric).map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor)).fold(0.0, f64::max)
}

/// Outcome of comparing tape gradients against finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per input tensor.
    pub per_input: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_error() < tol
    }
}

/// Denominator floor in [`check_gradients`]; keeps near-zero components
/// from turning rounding noise into large relative errors.
pub const GRADCHECK_FLOOR: f64 = 1e-3;

/// Differentiates the scalar built by `build` with respect to every input,
/// once through the tape and once by central differences with step `h`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.item(out)
    };
    // surface forward errors before differencing
    eval(inputs)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let mut work = inputs.to_vec();
        let numeric = finite_diff_grad(
            |x| {
                work[k] = x.clone();
                eval(&work).expect("forward succeeded at the base point")
            },
            input,
            h,
        );
        per_input.push(max_relative_error(&analytic[k], numeric.data(), GRADCHECK_FLOOR));
    }
    Ok(GradCheckReport { per_input })
}
