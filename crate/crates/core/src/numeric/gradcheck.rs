use std::fmt;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Magnitude below which gradient entries are compared absolutely rather
/// than relatively.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = self.worst_coordinate;
        write!(
            f,
            "{}: max relative error {:.3e} (tolerance {:.1e}) at coordinate {}: analytic {:.10e}, numeric {:.10e}",
            if self.passed() { "pass" } else { "FAIL" },
            self.max_rel_error,
            self.tolerance,
            i,
            self.analytic.get(i).copied().unwrap_or(f64::NAN),
            self.numeric.get(i).copied().unwrap_or(f64::NAN),
        )
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the tape gradient of a scalar function against central
/// differences `(f(θ+εeᵢ) − f(θ−εeᵢ)) / 2ε` for every coordinate of `theta`.
///
/// `f` receives a fresh graph and the variable holding `theta`, and returns
/// the scalar output.
pub fn grad_check<F>(f: F, theta: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("step must be positive, got {eps}")));
    }
    let eval = |point: Tensor| -> Result<f64> {
        let mut g = Graph::inference();
        let x = g.variable(point);
        let out = f(&mut g, x)?;
        let v = g.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("grad_check objective".into()))
        }
    };

    let mut g = Graph::new();
    let x = g.variable(theta.clone());
    let out = f(&mut g, x)?;
    g.value(out).check_finite("grad_check objective")?;
    g.backward(out)?;
    let analytic = g
        .grad(x)
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; theta.numel()]);

    let mut numeric = Vec::with_capacity(theta.numel());
    for i in 0..theta.numel() {
        let mut plus = theta.clone();
        plus.data_mut()[i] += eps;
        let mut minus = theta.clone();
        minus.data_mut()[i] -= eps;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }

    let (worst_coordinate, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
        worst_coordinate,
        tolerance: tol,
    })
}
