use nalgebra::{Matrix2x3, Matrix2x6, Vector2};

use crate::geometry::{skew, CameraIntrinsics, Pixel, Point3, Pose, DEPTH_EPSILON};

#[derive(Clone, Copy, Debug)]
pub struct Reprojection {
    /// observed − projected
    pub residual: Vector2<f64>,
    /// ∂r/∂ξ for the left update `exp(ξ)·T`, ξ = (ρ, φ).
    pub d_pose: Matrix2x6<f64>,
    pub d_point: Matrix2x3<f64>,
}

/// `None` when the point is at or behind the camera.
pub fn residual_and_jacobian(
    pose: &Pose,
    point: &Point3,
    observed: &Pixel,
    cam: &CameraIntrinsics,
) -> Option<Reprojection> {
    let pc = pose.transform(point);
    if pc.z <= DEPTH_EPSILON {
        return None;
    }
    let iz = 1.0 / pc.z;
    let projected = Vector2::new(cam.fx * pc.x * iz + cam.cx, cam.fy * pc.y * iz + cam.cy);
    let j_proj = Matrix2x3::new(
        cam.fx * iz, 0.0, -cam.fx * pc.x * iz * iz,
        0.0, cam.fy * iz, -cam.fy * pc.y * iz * iz,
    );
    let mut d_pose = Matrix2x6::zeros();
    d_pose.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-j_proj));
    d_pose.fixed_view_mut::<2, 3>(0, 3).copy_from(&(j_proj * skew(&pc)));
    let d_point = -j_proj * pose.rotation_matrix();
    Some(Reprojection { residual: observed - projected, d_pose, d_point })
}
