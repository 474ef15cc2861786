use nalgebra::DVector;

use super::{OptimError, HUBER_DELTA};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmConfig {
    pub max_iters: usize,
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub lambda_max: f64,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub cost_tolerance: f64,
    pub huber_delta: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            initial_lambda: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.1,
            lambda_max: 1e12,
            cost_tolerance: 1e-10,
            huber_delta: HUBER_DELTA,
        }
    }
}

impl LmConfig {
    pub fn is_valid(&self) -> bool {
        self.max_iters > 0
            && self.initial_lambda > 0.0
            && self.lambda_up > 1.0
            && self.lambda_down > 0.0
            && self.lambda_down < 1.0
            && self.lambda_max > self.initial_lambda
            && self.cost_tolerance > 0.0
            && self.huber_delta > 0.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LmSummary {
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Accepted steps.
    pub iterations: usize,
    pub converged: bool,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

/// What the driver needs from a least-squares problem.
pub(crate) trait LmProblem {
    type Snapshot;

    fn cost(&self) -> f64;
    /// Builds the normal equations at the current state; returns the gradient's max-norm.
    fn linearize(&mut self) -> f64;
    /// Solves the damped system built by the last `linearize`.
    fn solve(&self, lambda: f64) -> Option<DVector<f64>>;
    fn apply(&mut self, step: &DVector<f64>);
    fn snapshot(&self) -> Self::Snapshot;
    fn restore(&mut self, snap: Self::Snapshot);
}

const GRADIENT_FLOOR: f64 = 1e-13;
/// Costs below this are rounding noise for pixel-scale residuals.
const COST_FLOOR: f64 = 1e-24;

pub(crate) fn run_lm<P: LmProblem>(problem: &mut P, cfg: &LmConfig) -> Result<LmSummary, OptimError> {
    let mut cost = problem.cost();
    let mut summary = LmSummary { initial_cost: cost, final_cost: cost, cost_history: vec![cost], ..Default::default() };
    let mut lambda = cfg.initial_lambda;
    'outer: while summary.iterations < cfg.max_iters {
        let grad = problem.linearize();
        if grad <= GRADIENT_FLOOR || cost <= COST_FLOOR {
            summary.converged = true;
            break;
        }
        loop {
            let Some(step) = problem.solve(lambda) else {
                lambda *= cfg.lambda_up;
                if lambda > cfg.lambda_max {
                    return Err(OptimError::SingularSystem);
                }
                continue;
            };
            let snap = problem.snapshot();
            problem.apply(&step);
            let new_cost = problem.cost();
            if new_cost < cost {
                let rel = (cost - new_cost) / cost;
                cost = new_cost;
                summary.iterations += 1;
                summary.cost_history.push(cost);
                lambda = (lambda * cfg.lambda_down).max(1e-15);
                if rel < cfg.cost_tolerance {
                    summary.converged = true;
                    break 'outer;
                }
                break;
            }
            problem.restore(snap);
            lambda *= cfg.lambda_up;
            if lambda > cfg.lambda_max {
                // no damping level improves the cost: a local minimum to working precision
                summary.converged = true;
                break 'outer;
            }
        }
    }
    summary.final_cost = cost;
    Ok(summary)
}

/// Marquardt damping of a square system in place: `H + λ·diag(H)`.
pub(crate) fn damp(h: &mut nalgebra::DMatrix<f64>, lambda: f64) {
    for i in 0..h.nrows() {
        let d = h[(i, i)].max(1e-9);
        h[(i, i)] += lambda * d;
    }
}
