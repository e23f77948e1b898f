//! Derivative-free minimisation used by the CSS fits.

use argmin::core::{CostFunction, Executor, State, TerminationReason, TerminationStatus};
use argmin::solver::neldermead::NelderMead;

#[derive(Debug, Clone)]
pub(crate) struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub converged: bool,
    pub evaluations: usize,
}

struct Objective<F>(F);

impl<F: Fn(&[f64]) -> f64> CostFunction for Objective<F> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Self::Param) -> Result<f64, argmin::core::Error> {
        let v = (self.0)(x);
        Ok(if v.is_finite() { v } else { f64::INFINITY })
    }
}

/// Nelder–Mead simplex search from an axis-aligned simplex of size `step`
/// around `x0`. Converged means the spread of the simplex values fell below
/// `tol` relative to the starting value.
pub(crate) fn nelder_mead<F>(f: F, x0: &[f64], step: f64, tol: f64, max_iter: usize) -> Minimum
where
    F: Fn(&[f64]) -> f64,
{
    let objective = Objective(f);
    let start = objective.cost(&x0.to_vec()).unwrap_or(f64::INFINITY);
    if x0.is_empty() {
        return Minimum { x: Vec::new(), value: start, converged: true, evaluations: 1 };
    }
    let mut simplex = vec![x0.to_vec()];
    for i in 0..x0.len() {
        let mut v = x0.to_vec();
        v[i] += step;
        simplex.push(v);
    }
    let scale = if start.is_finite() { start.abs() + tol } else { 1.0 };
    let failed = |evaluations| Minimum { x: x0.to_vec(), value: start, converged: false, evaluations };
    let solver = match NelderMead::new(simplex).with_sd_tolerance(tol * scale) {
        Ok(s) => s,
        Err(_) => return failed(1),
    };
    let run = Executor::new(objective, solver).configure(|s| s.max_iters(max_iter as u64)).run();
    let Ok(run) = run else {
        return failed(1);
    };
    let state = run.state();
    let evaluations = state.get_func_counts().values().sum::<u64>() as usize + 1;
    let Some(x) = state.get_best_param().cloned() else {
        return failed(evaluations);
    };
    Minimum {
        x,
        value: state.get_best_cost(),
        converged: matches!(state.get_termination_status(), TerminationStatus::Terminated(TerminationReason::SolverConverged)),
        evaluations,
    }
}
