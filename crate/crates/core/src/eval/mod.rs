//! Trajectory metrics: association, similarity alignment, ATE, RPE, and reports.

mod metrics;
mod report;
mod trajectory;

use std::path::PathBuf;

pub use metrics::{
    align, associate, ate, evaluate, rpe, AlignMode, AteResult, EvalConfig, MetricReport, RpeMode, RpeResult,
    KITTI_LENGTHS,
};
pub use report::{emit_report, parse_metrics_csv, render_svg};
pub use trajectory::Trajectory;

use crate::optim::OptimError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("trajectories do not overlap in time")]
    NoOverlap,
    #[error("trajectory is empty")]
    Empty,
    #[error("timestamps must be strictly increasing (sample {0})")]
    NonMonotonic(usize),
    #[error("alignment failed: {0}")]
    Alignment(#[from] OptimError),
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}
