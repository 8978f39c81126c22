//! Central finite-difference check of reverse-mode gradients.
//!
//! The analytic gradient comes from the `f32` engine; the finite differences
//! are taken on an `f64` evaluation of the same function so that round-off
//! in the reference stays far below the tolerance.

use super::{Graph, Real, Result, Tensor, TensorError, Var};

/// A scalar-valued function that can be built on a graph of either precision.
pub trait ScalarFn {
    fn eval<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max_i |analytic_i − numeric_i| / max(|analytic_i|, |numeric_i|, 1)`
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f32>,
    pub numeric: Vec<f64>,
    pub tol: f64,
    pub passed: bool,
}

fn eval_f64<F: ScalarFn>(f: &F, x: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let out = f.eval(&mut g, xv)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(TensorError::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares `backward` of `f` at `x` with central differences of step `h`.
///
/// The error is relative for gradient entries of magnitude above one and
/// absolute below it, so entries that are zero analytically do not divide
/// by round-off.
pub fn grad_check<F: ScalarFn>(f: &F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport> {
    let mut g = Graph::<f32>::new();
    let xv = g.param(x.clone());
    let out = f.eval(&mut g, xv)?;
    g.backward(out)?;
    let analytic = g
        .grad(xv)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut probe: Tensor<f64> = x.cast();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval_f64(f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval_f64(f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }

    let (mut worst, mut worst_index) = (0.0f64, 0);
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let a = a as f64;
        let err = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
        let err = if err.is_finite() { err } else { f64::INFINITY };
        if err > worst {
            worst = err;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        worst_index,
        analytic,
        numeric,
        tol,
        passed: worst < tol,
    })
}
