//! Central finite-difference validation of analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smallest denominator used when forming relative errors.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates_checked: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the graph's analytic gradients against central differences.
///
/// `build` receives a fresh graph and one leaf per entry of `params` (in the
/// same order) and must return a scalar loss. `stride` checks every
/// `stride`-th coordinate of each parameter (1 = all).
pub fn grad_check<T, F>(
    params: &[Tensor<T>],
    eps: f64,
    stride: usize,
    build: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    assert!(eps > 0.0 && eps <= 1e-2, "eps must lie in (0, 1e-2]");
    let stride = stride.max(1);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates_checked: 0,
    };
    if params.is_empty() {
        return Ok(report);
    }

    let mut graph = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| graph.param(p.clone())).collect();
    let loss = build(&mut graph, &vars)?;
    let grads = graph.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect();
    drop(graph);

    let eval = |perturbed: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|p| g.param(p.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item().to_f64_lossy())
    };

    let mut work: Vec<Tensor<T>> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ci in (0..param.numel()).step_by(stride) {
            let orig = param.data()[ci];
            // Recover the step actually representable in T.
            let plus = orig + T::from_f64_lossy(eps);
            let minus = orig - T::from_f64_lossy(eps);
            work[pi].data_mut()[ci] = plus;
            let f_plus = eval(&work)?;
            work[pi].data_mut()[ci] = minus;
            let f_minus = eval(&work)?;
            work[pi].data_mut()[ci] = orig;

            let numeric = (f_plus - f_minus) / (plus - minus).to_f64_lossy();
            let a = analytic[pi].data()[ci].to_f64_lossy();
            let err = relative_error(a, numeric);
            report.coordinates_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((pi, ci));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
