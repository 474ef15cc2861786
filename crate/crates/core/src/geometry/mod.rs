//! Camera model, rigid and similarity transforms, projection, triangulation,
//! and two-view initialization.

mod camera;
mod pose;
mod triangulation;
mod two_view;

pub use camera::{project, CameraIntrinsics, Pixel, DEPTH_EPSILON};
pub use pose::{skew, so3_exp, so3_log, Point3, Pose, Sim3, Vec3, Vector7};
pub use triangulation::{parallax_angle, triangulate, triangulate_with_parallax, Degenerate, PARALLAX_MIN_RAD};
pub use two_view::{estimate_two_view, InitFailure, RansacConfig, TwoViewEstimate};

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("calibration line {line}: {message}")]
    Calibration { line: usize, message: String },
    #[error("matrix is not a rotation (orthonormality error {error:e})")]
    NotARotation { error: f64 },
    #[error("similarity scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("{0}")]
    Io(String),
}
