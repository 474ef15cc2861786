//! Nonlinear least squares: reprojection residuals, Levenberg–Marquardt with
//! a dense Schur complement, pose-only refinement, closed-form similarity
//! estimation, and Sim3 pose-graph optimization.

mod ba;
mod lm;
mod pose_graph;
mod pose_only;
mod reprojection;
mod sim3;

pub use ba::{BundleProblem, Observation};
pub use lm::{LmConfig, LmSummary};
pub use pose_graph::{optimize_pose_graph, PoseGraphEdge, PoseGraphSummary};
pub use pose_only::{optimize_pose_only, PoseOnlyResult, MIN_ASSOCIATIONS};
pub use reprojection::{residual_and_jacobian, Reprojection};
pub use sim3::{solve_rigid, solve_sim3};

/// Squared-residual gate for outlier labelling (χ² 95% quantile, 2 dof).
pub const OUTLIER_CHI2: f64 = 5.99;
/// Huber threshold in pixels.
pub const HUBER_DELTA: f64 = 2.45;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("damped normal equations are singular at the damping ceiling")]
    SingularSystem,
    #[error("need at least {required} correspondences, got {got}")]
    TooFewMatches { got: usize, required: usize },
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("pose graph is disconnected: vertex {0} cannot reach a fixed vertex")]
    Disconnected(usize),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

/// Huber cost of a squared residual.
pub fn huber_cost(sq: f64, delta: f64) -> f64 {
    if sq <= delta * delta {
        sq
    } else {
        2.0 * delta * sq.sqrt() - delta * delta
    }
}

/// IRLS weight matching [`huber_cost`].
pub fn huber_weight(sq: f64, delta: f64) -> f64 {
    if sq <= delta * delta {
        1.0
    } else {
        delta / sq.sqrt()
    }
}
