//! Two-view initialization: normalized eight-point fundamental matrix inside
//! RANSAC, essential-matrix decomposition, and cheirality disambiguation.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::camera::{CameraIntrinsics, Pixel, DEPTH_EPSILON};
use super::pose::{Point3, Pose};
use super::triangulation::{linear_triangulation, parallax_angle, PARALLAX_MIN_RAD};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier gate on the Sampson distance, pixels.
    pub epipolar_threshold_px: f64,
    /// Cheirality gate on the reprojection error of triangulated inliers, pixels.
    pub reprojection_threshold_px: f64,
    pub min_inliers: usize,
    pub min_parallax_rad: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            epipolar_threshold_px: 1.5,
            reprojection_threshold_px: 2.0,
            min_inliers: 15,
            min_parallax_rad: PARALLAX_MIN_RAD,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum InitFailure {
    #[error("need at least 8 matches, got {0}")]
    TooFewMatches(usize),
    #[error("only {found} epipolar inliers, need {required}")]
    TooFewInliers { found: usize, required: usize },
    #[error("no pose candidate places enough points in front of both cameras ({best} of {inliers})")]
    Cheirality { best: usize, inliers: usize },
    #[error("two pose candidates are equally plausible")]
    Ambiguous,
    #[error("median parallax {deg:.3} deg is below the minimum")]
    LowParallax { deg: f64 },
}

#[derive(Clone, Debug)]
pub struct TwoViewEstimate {
    /// Pose of the second camera when the first sits at the origin; unit-norm translation.
    pub pose: Pose,
    /// Matches within the epipolar threshold.
    pub inliers: Vec<bool>,
    /// Triangulated points (first camera frame) for inliers passing cheirality.
    pub points: Vec<Option<Point3>>,
}

pub fn estimate_two_view(
    matches: &[(Pixel, Pixel)],
    cam: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<TwoViewEstimate, InitFailure> {
    let n = matches.len();
    if n < 8 {
        return Err(InitFailure::TooFewMatches(n));
    }
    let pts1: Vec<Pixel> = matches.iter().map(|m| m.0).collect();
    let pts2: Vec<Pixel> = matches.iter().map(|m| m.1).collect();
    let (n1, t1) = normalize(&pts1);
    let (n2, t2) = normalize(&pts2);
    let thr2 = cfg.epipolar_threshold_px * cfg.epipolar_threshold_px;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, Matrix3<f64>)> = None;
    let mut sample1 = Vec::with_capacity(8);
    let mut sample2 = Vec::with_capacity(8);
    for _ in 0..cfg.iterations.max(1) {
        let idx = rand::seq::index::sample(&mut rng, n, 8);
        sample1.clear();
        sample2.clear();
        for i in idx.iter() {
            sample1.push(n1[i]);
            sample2.push(n2[i]);
        }
        let Some(fh) = eight_point(&sample1, &sample2) else { continue };
        let f = t2.transpose() * fh * t1;
        let count = pts1.iter().zip(&pts2).filter(|(a, b)| sampson(&f, a, b) < thr2).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, f));
        }
    }
    let (count, mut f) = best.ok_or(InitFailure::TooFewInliers { found: 0, required: cfg.min_inliers })?;
    if count < cfg.min_inliers.max(8) {
        return Err(InitFailure::TooFewInliers { found: count, required: cfg.min_inliers.max(8) });
    }
    let mut inliers: Vec<bool> = pts1.iter().zip(&pts2).map(|(a, b)| sampson(&f, a, b) < thr2).collect();
    // refit on the consensus set
    let (s1, s2): (Vec<Pixel>, Vec<Pixel>) = inliers
        .iter()
        .enumerate()
        .filter(|(_, &ok)| ok)
        .map(|(i, _)| (n1[i], n2[i]))
        .unzip();
    if let Some(fh) = eight_point(&s1, &s2) {
        let refit = t2.transpose() * fh * t1;
        let mask: Vec<bool> = pts1.iter().zip(&pts2).map(|(a, b)| sampson(&refit, a, b) < thr2).collect();
        if mask.iter().filter(|&&b| b).count() >= count {
            f = refit;
            inliers = mask;
        }
    }
    let n_inliers = inliers.iter().filter(|&&b| b).count();

    let k = cam.k_matrix();
    let e = k.transpose() * f * k;
    let candidates = decompose_essential(&e);
    let reproj2 = cfg.reprojection_threshold_px * cfg.reprojection_threshold_px;
    let mut scored: Vec<(usize, Pose, Vec<Option<Point3>>, Vec<f64>)> = candidates
        .into_iter()
        .map(|pose| {
            let mut points = vec![None; n];
            let mut parallaxes = Vec::new();
            let c2 = pose.center();
            for i in (0..n).filter(|&i| inliers[i]) {
                let Some(p) = linear_triangulation(&pts1[i], &pts2[i], &Pose::identity(), &pose, cam) else {
                    continue;
                };
                let q2 = pose.transform(&p);
                if p.z <= DEPTH_EPSILON || q2.z <= DEPTH_EPSILON {
                    continue;
                }
                let (Some(r1), Some(r2)) = (cam.project_camera(&p), cam.project_camera(&q2)) else {
                    continue;
                };
                if (r1 - pts1[i]).norm_squared() > reproj2 || (r2 - pts2[i]).norm_squared() > reproj2 {
                    continue;
                }
                parallaxes.push(parallax_angle(&p, &Point3::zeros(), &c2));
                points[i] = Some(p);
            }
            (parallaxes.len(), pose, points, parallaxes)
        })
        .collect();
    scored.sort_by_key(|s| std::cmp::Reverse(s.0));
    let best_good = scored[0].0;
    let second_good = scored[1].0;
    let required = cfg.min_inliers.max((0.9 * n_inliers as f64).ceil() as usize);
    if best_good < required {
        return Err(InitFailure::Cheirality { best: best_good, inliers: n_inliers });
    }
    if second_good as f64 > 0.7 * best_good as f64 {
        return Err(InitFailure::Ambiguous);
    }
    let (_, pose, points, mut parallaxes) = scored.swap_remove(0);
    parallaxes.sort_by(f64::total_cmp);
    let median = parallaxes[parallaxes.len() / 2];
    if median < cfg.min_parallax_rad {
        return Err(InitFailure::LowParallax { deg: median.to_degrees() });
    }
    Ok(TwoViewEstimate { pose, inliers, points })
}

/// Hartley normalization: centroid to origin, mean distance √2.
fn normalize(pts: &[Pixel]) -> (Vec<Pixel>, Matrix3<f64>) {
    let n = pts.len() as f64;
    let mean = pts.iter().fold(Pixel::zeros(), |acc, p| acc + p) / n;
    let spread = pts.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
    let s = if spread > 0.0 { std::f64::consts::SQRT_2 / spread } else { 1.0 };
    let t = Matrix3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0);
    (pts.iter().map(|p| (p - mean) * s).collect(), t)
}

fn eight_point(p1: &[Pixel], p2: &[Pixel]) -> Option<Matrix3<f64>> {
    let rows = p1.len().max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (x1, x2)) in p1.iter().zip(p2).enumerate() {
        let r = [
            x2.x * x1.x, x2.x * x1.y, x2.x,
            x2.y * x1.x, x2.y * x1.y, x2.y,
            x1.x, x1.y, 1.0,
        ];
        for (j, v) in r.iter().enumerate() {
            a[(i, j)] = *v;
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let f = vt.row(vt.nrows() - 1);
    let fm = Matrix3::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]);
    let svd = fm.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut s = svd.singular_values;
    s[2] = 0.0;
    let out = u * Matrix3::from_diagonal(&s) * vt;
    out.iter().all(|v| v.is_finite()).then_some(out)
}

fn sampson(f: &Matrix3<f64>, a: &Pixel, b: &Pixel) -> f64 {
    let x1 = Vector3::new(a.x, a.y, 1.0);
    let x2 = Vector3::new(b.x, b.y, 1.0);
    let fx1 = f * x1;
    let ftx2 = f.transpose() * x2;
    let num = x2.dot(&fx1);
    let den = fx1.x * fx1.x + fx1.y * fx1.y + ftx2.x * ftx2.x + ftx2.y * ftx2.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    num * num / den
}

/// The four `(R, ±t)` factorizations of an essential matrix.
fn decompose_essential(e: &Matrix3<f64>) -> Vec<Pose> {
    let svd = e.svd(true, true);
    let (Some(mut u), Some(mut vt)) = (svd.u, svd.v_t) else {
        return Vec::new();
    };
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * vt;
    let r2 = u * w.transpose() * vt;
    let t = u.column(2).normalize();
    let mut out = Vec::with_capacity(4);
    for r in [r1, r2] {
        for sign in [1.0, -1.0] {
            if let Ok(p) = Pose::from_matrix(&r, sign * t) {
                out.push(p);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::camera::project;
    use crate::geometry::pose::{so3_exp, Vec3};
    use rand::Rng;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn scene(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-4.0..4.0), rng.random_range(-3.0..3.0), rng.random_range(5.0..12.0)))
            .collect()
    }

    fn matches_for(points: &[Point3], p1: &Pose, p2: &Pose) -> Vec<(Pixel, Pixel)> {
        points
            .iter()
            .filter_map(|p| Some((project(p, p1, &cam())?, project(p, p2, &cam())?)))
            .collect()
    }

    #[test]
    fn recovers_synthetic_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let points = scene(&mut rng, 100);
        let motion = Pose::new(so3_exp(&Vec3::new(0.02, -0.05, 0.01)), Vec3::new(-0.8, 0.1, 0.2));
        let m = matches_for(&points, &Pose::identity(), &motion);
        assert_eq!(m.len(), 100);
        let est = estimate_two_view(&m, &cam(), &RansacConfig::default()).unwrap();
        let rot_err = (est.pose.rotation().inverse() * motion.rotation()).angle();
        let t_err = est.pose.translation().angle(&motion.translation().normalize());
        assert!(rot_err < 1e-4, "rotation error {rot_err}");
        assert!(t_err < 1e-4, "translation error {t_err}");
        assert!((est.pose.translation().norm() - 1.0).abs() < 1e-12);
        assert!(est.inliers.iter().all(|&b| b));
    }

    #[test]
    fn too_few_matches() {
        let m = vec![(Pixel::new(1.0, 1.0), Pixel::new(2.0, 2.0)); 7];
        assert_eq!(estimate_two_view(&m, &cam(), &RansacConfig::default()).unwrap_err(), InitFailure::TooFewMatches(7));
    }

    #[test]
    fn pure_rotation_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let points = scene(&mut rng, 100);
        let motion = Pose::new(so3_exp(&Vec3::new(0.01, 0.04, 0.0)), Vec3::zeros());
        let m = matches_for(&points, &Pose::identity(), &motion);
        assert!(estimate_two_view(&m, &cam(), &RansacConfig::default()).is_err());
    }

    #[test]
    fn invariant_under_global_rigid_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let points = scene(&mut rng, 80);
        let p1 = Pose::identity();
        let p2 = Pose::new(so3_exp(&Vec3::new(0.0, 0.05, 0.0)), Vec3::new(-1.0, 0.0, 0.1));
        let g = Pose::new(so3_exp(&Vec3::new(0.3, -0.2, 0.5)), Vec3::new(4.0, -2.0, 7.0));
        let moved: Vec<Point3> = points.iter().map(|p| g.transform(p)).collect();
        let a = estimate_two_view(&matches_for(&points, &p1, &p2), &cam(), &RansacConfig::default()).unwrap();
        let gi = g.inverse();
        let b = estimate_two_view(&matches_for(&moved, &(p1 * gi), &(p2 * gi)), &cam(), &RansacConfig::default())
            .unwrap();
        assert!((a.pose.rotation_matrix() - b.pose.rotation_matrix()).abs().max() < 1e-6);
        assert!((a.pose.translation() - b.pose.translation()).norm() < 1e-6);
    }
}
