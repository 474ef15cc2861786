use nalgebra::{Matrix2x3, Matrix3, Matrix4, RowVector4, Vector2};

use super::camera::{CameraIntrinsics, Pixel, DEPTH_EPSILON};
use super::pose::{Point3, Pose};

/// Minimum angle between the two viewing rays of an accepted point.
pub const PARALLAX_MIN_RAD: f64 = std::f64::consts::PI / 180.0;

const MIN_BASELINE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum Degenerate {
    #[error("camera centers coincide")]
    ZeroBaseline,
    #[error("parallax below the minimum")]
    LowParallax,
    #[error("point is not in front of both cameras")]
    NegativeDepth,
    #[error("linear system has no finite solution")]
    AtInfinity,
}

/// Angle between the rays from two camera centers to `p`, in `[0, π]`.
pub fn parallax_angle(p: &Point3, c1: &Point3, c2: &Point3) -> f64 {
    let r1 = p - c1;
    let r2 = p - c2;
    r1.cross(&r2).norm().atan2(r1.dot(&r2))
}

/// Linear (DLT) two-view triangulation followed by Gauss-Newton refinement of
/// the pixel reprojection error. Rejects low-parallax and behind-camera points.
pub fn triangulate(
    obs1: &Pixel,
    obs2: &Pixel,
    pose1: &Pose,
    pose2: &Pose,
    cam: &CameraIntrinsics,
) -> Result<Point3, Degenerate> {
    triangulate_with_parallax(obs1, obs2, pose1, pose2, cam, PARALLAX_MIN_RAD)
}

pub fn triangulate_with_parallax(
    obs1: &Pixel,
    obs2: &Pixel,
    pose1: &Pose,
    pose2: &Pose,
    cam: &CameraIntrinsics,
    min_parallax: f64,
) -> Result<Point3, Degenerate> {
    let (c1, c2) = (pose1.center(), pose2.center());
    if (c1 - c2).norm() < MIN_BASELINE {
        return Err(Degenerate::ZeroBaseline);
    }
    let mut p = linear_triangulation(obs1, obs2, pose1, pose2, cam).ok_or(Degenerate::AtInfinity)?;
    refine(&mut p, &[(*obs1, pose1), (*obs2, pose2)], cam);
    if pose1.transform(&p).z <= DEPTH_EPSILON || pose2.transform(&p).z <= DEPTH_EPSILON {
        return Err(Degenerate::NegativeDepth);
    }
    if parallax_angle(&p, &c1, &c2) < min_parallax {
        return Err(Degenerate::LowParallax);
    }
    Ok(p)
}

pub(crate) fn linear_triangulation(
    obs1: &Pixel,
    obs2: &Pixel,
    pose1: &Pose,
    pose2: &Pose,
    cam: &CameraIntrinsics,
) -> Option<Point3> {
    let rows = |obs: &Pixel, pose: &Pose| -> [RowVector4<f64>; 2] {
        let x = cam.unproject(obs);
        let m = pose.to_matrix();
        let (p0, p1, p2) = (m.row(0).into_owned(), m.row(1).into_owned(), m.row(2).into_owned());
        [x.x * p2 - p0, x.y * p2 - p1]
    };
    let [a0, a1] = rows(obs1, pose1);
    let [a2, a3] = rows(obs2, pose2);
    let mut a = Matrix4::from_rows(&[a0, a1, a2, a3]);
    // scale rows for conditioning
    for mut r in a.row_iter_mut() {
        let n = r.norm();
        if n > 0.0 {
            r /= n;
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))?;
    let h = vt.row(imin);
    if h[3].abs() < 1e-14 {
        return None;
    }
    let p = Point3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
    p.iter().all(|v| v.is_finite()).then_some(p)
}

/// A few Gauss-Newton steps on the summed pixel reprojection error.
pub(crate) fn refine(p: &mut Point3, views: &[(Pixel, &Pose)], cam: &CameraIntrinsics) {
    let cost = |p: &Point3| -> f64 {
        views
            .iter()
            .map(|(obs, pose)| {
                let pc = pose.transform(p);
                if pc.z <= DEPTH_EPSILON {
                    return f64::INFINITY;
                }
                let px = Vector2::new(cam.fx * pc.x / pc.z + cam.cx, cam.fy * pc.y / pc.z + cam.cy);
                (obs - px).norm_squared()
            })
            .sum()
    };
    let mut current = cost(p);
    if !current.is_finite() {
        return;
    }
    for _ in 0..10 {
        if current < 1e-24 {
            break;
        }
        let mut h = Matrix3::zeros();
        let mut g = nalgebra::Vector3::zeros();
        for (obs, pose) in views {
            let pc = pose.transform(p);
            let z = pc.z;
            let proj = Vector2::new(cam.fx * pc.x / z + cam.cx, cam.fy * pc.y / z + cam.cy);
            let r = obs - proj;
            let dproj = Matrix2x3::new(
                cam.fx / z, 0.0, -cam.fx * pc.x / (z * z),
                0.0, cam.fy / z, -cam.fy * pc.y / (z * z),
            );
            let j = dproj * pose.rotation_matrix();
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        let Some(step) = h.try_inverse().map(|hi| hi * g) else { break };
        let candidate = *p + step;
        let c = cost(&candidate);
        if c < current {
            *p = candidate;
            let done = (current - c) <= 1e-15 * current;
            current = c;
            if done {
                break;
            }
        } else {
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::camera::project;
    use crate::geometry::pose::Vec3;
    use nalgebra::Vector6;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn parallax_examples() {
        let a = parallax_angle(&Vec3::new(0.0, 0.0, 1.0), &Vec3::new(1.0, 0.0, 0.0), &Vec3::new(-1.0, 0.0, 0.0));
        assert!((a - 2.0 * 1f64.atan()).abs() < 1e-15);
        let a = parallax_angle(&Vec3::zeros(), &Vec3::new(1.0, 0.0, 0.0), &Vec3::new(-2.0, 0.0, 0.0));
        assert!((a - std::f64::consts::PI).abs() < 1e-15);
        let c = Vec3::new(1.0, 1.0, 1.0);
        assert_eq!(parallax_angle(&Vec3::new(0.0, 0.0, 5.0), &c, &c), 0.0);
    }

    #[test]
    fn recovers_exact_point_with_half_meter_baseline() {
        let p = Vec3::new(1.0, 2.0, 8.0);
        let pose1 = Pose::identity();
        let pose2 = Pose::from_translation(Vec3::new(-0.5, 0.0, 0.0));
        let o1 = project(&p, &pose1, &cam()).unwrap();
        let o2 = project(&p, &pose2, &cam()).unwrap();
        let q = triangulate(&o1, &o2, &pose1, &pose2, &cam()).unwrap();
        assert!((q - p).norm() < 1e-6);
    }

    #[test]
    fn identical_poses_are_degenerate() {
        let p = Vec3::new(1.0, 2.0, 8.0);
        let o = project(&p, &Pose::identity(), &cam()).unwrap();
        assert_eq!(
            triangulate(&o, &o, &Pose::identity(), &Pose::identity(), &cam()),
            Err(Degenerate::ZeroBaseline)
        );
    }

    #[test]
    fn tiny_baseline_is_low_parallax() {
        let p = Vec3::new(0.0, 0.0, 20.0);
        let pose2 = Pose::from_translation(Vec3::new(-0.01, 0.0, 0.0));
        let o1 = project(&p, &Pose::identity(), &cam()).unwrap();
        let o2 = project(&p, &pose2, &cam()).unwrap();
        assert_eq!(
            triangulate(&o1, &o2, &Pose::identity(), &pose2, &cam()),
            Err(Degenerate::LowParallax)
        );
    }

    #[test]
    fn random_rigs_round_trip() {
        // generate-project-recover oracle
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut recovered = 0;
        while recovered < 50 {
            let p = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(4.0..12.0));
            let pose1 = Pose::exp(&Vector6::from_fn(|_, _| rng.random_range(-0.05..0.05)));
            let pose2 = Pose::exp(&Vector6::from_fn(|i, _| {
                if i < 3 { rng.random_range(-1.0..1.0) } else { rng.random_range(-0.1..0.1) }
            }));
            let (Some(o1), Some(o2)) = (project(&p, &pose1, &cam()), project(&p, &pose2, &cam())) else {
                continue;
            };
            if parallax_angle(&p, &pose1.center(), &pose2.center()) < 2.0 * PARALLAX_MIN_RAD {
                continue;
            }
            let q = triangulate(&o1, &o2, &pose1, &pose2, &cam()).unwrap();
            assert!((q - p).norm() <= 1e-6 * p.norm(), "{q} vs {p}");
            recovered += 1;
        }
    }
}
