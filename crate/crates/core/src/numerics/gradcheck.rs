//! Central finite-difference gradient checks.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Result, WrdError};

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every entry of every
/// input. Returns the worst per-input error, each measured as
/// `max_i |analytic_i − numeric_i| / max(‖analytic‖∞, ‖numeric‖∞)`.
///
/// `f` receives a fresh graph per evaluation and the inputs bound as
/// differentiable leaves, so stochastic pieces inside `f` must be reseeded
/// from a fixed seed on every call.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item()?;
        if !v.is_finite() {
            return Err(WrdError::Numeric(format!("function value {v} is not finite")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| g.grad(v).map_or_else(|| vec![0.0; x.len()], Tensor::into_data))
        .collect();

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (which, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let orig = work[which].data()[i];
            work[which].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[which].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[which].data_mut()[i] = orig;
            *n = (plus - minus) / (2.0 * h);
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(WrdError::Numeric("analytic gradient is not finite".into()));
        }
        let scale = a.iter().chain(&numeric).fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = a.iter().zip(&numeric).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), h)
}
