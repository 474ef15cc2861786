use nalgebra::{DMatrix, DVector, Matrix6, Vector6};

use super::lm::{damp, run_lm, LmConfig, LmProblem};
use super::reprojection::residual_and_jacobian;
use super::{huber_cost, huber_weight, OptimError, OUTLIER_CHI2};
use crate::geometry::{CameraIntrinsics, Pixel, Point3, Pose};

const BEHIND_PENALTY: f64 = 1e6;
pub const MIN_ASSOCIATIONS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct PoseOnlyResult {
    pub pose: Pose,
    /// Per association: residual within the outlier gate at the final pose.
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    pub outlier_count: usize,
    pub final_cost: f64,
}

struct PoseProblem<'a> {
    pose: Pose,
    assoc: &'a [(Point3, Pixel)],
    active: &'a [bool],
    cam: &'a CameraIntrinsics,
    delta: f64,
    h: Matrix6<f64>,
    b: Vector6<f64>,
}

impl LmProblem for PoseProblem<'_> {
    type Snapshot = Pose;

    fn cost(&self) -> f64 {
        self.assoc
            .iter()
            .zip(self.active)
            .filter(|(_, &a)| a)
            .map(|((p, px), _)| match residual_and_jacobian(&self.pose, p, px, self.cam) {
                Some(r) => huber_cost(r.residual.norm_squared(), self.delta),
                None => BEHIND_PENALTY,
            })
            .sum()
    }

    fn linearize(&mut self) -> f64 {
        self.h.fill(0.0);
        self.b.fill(0.0);
        for ((p, px), _) in self.assoc.iter().zip(self.active).filter(|(_, &a)| a) {
            if let Some(r) = residual_and_jacobian(&self.pose, p, px, self.cam) {
                let w = huber_weight(r.residual.norm_squared(), self.delta);
                let jt = r.d_pose.transpose() * w;
                self.h += jt * r.d_pose;
                self.b -= jt * r.residual;
            }
        }
        self.b.amax()
    }

    fn solve(&self, lambda: f64) -> Option<DVector<f64>> {
        let mut h = DMatrix::from_column_slice(6, 6, self.h.as_slice());
        damp(&mut h, lambda);
        let b = DVector::from_column_slice(self.b.as_slice());
        h.cholesky().map(|c| c.solve(&b))
    }

    fn apply(&mut self, step: &DVector<f64>) {
        let xi: Vector6<f64> = step.fixed_rows::<6>(0).into();
        self.pose = self.pose.retract(&xi);
    }

    fn snapshot(&self) -> Pose {
        self.pose
    }

    fn restore(&mut self, snap: Pose) {
        self.pose = snap;
    }
}

fn label(pose: &Pose, assoc: &[(Point3, Pixel)], cam: &CameraIntrinsics) -> Vec<bool> {
    assoc
        .iter()
        .map(|(p, px)| {
            residual_and_jacobian(pose, p, px, cam).is_some_and(|r| r.residual.norm_squared() <= OUTLIER_CHI2)
        })
        .collect()
}

/// Refines a camera pose against fixed 3D points, then labels and drops
/// outliers and refines once more.
pub fn optimize_pose_only(
    initial: &Pose,
    associations: &[(Point3, Pixel)],
    cam: &CameraIntrinsics,
    cfg: &LmConfig,
) -> Result<PoseOnlyResult, OptimError> {
    if associations.len() < MIN_ASSOCIATIONS {
        return Err(OptimError::TooFewMatches { got: associations.len(), required: MIN_ASSOCIATIONS });
    }
    let all = vec![true; associations.len()];
    let mut prob = PoseProblem {
        pose: *initial,
        assoc: associations,
        active: &all,
        cam,
        delta: cfg.huber_delta,
        h: Matrix6::zeros(),
        b: Vector6::zeros(),
    };
    run_lm(&mut prob, cfg)?;
    let first = prob.pose;
    let mask = label(&first, associations, cam);
    let mut pose = first;
    if mask.iter().filter(|&&m| m).count() >= MIN_ASSOCIATIONS && mask.iter().any(|&m| !m) {
        let mut second = PoseProblem { pose: first, active: &mask, ..prob };
        run_lm(&mut second, cfg)?;
        pose = second.pose;
    }
    let inliers = label(&pose, associations, cam);
    let inlier_count = inliers.iter().filter(|&&m| m).count();
    let final_cost = PoseProblem {
        pose,
        assoc: associations,
        active: &inliers,
        cam,
        delta: cfg.huber_delta,
        h: Matrix6::zeros(),
        b: Vector6::zeros(),
    }
    .cost();
    Ok(PoseOnlyResult { pose, outlier_count: inliers.len() - inlier_count, inlier_count, inliers, final_cost })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, so3_exp, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(400.0, 400.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn scene(seed: u64, n: usize) -> (Pose, Vec<(Point3, Pixel)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose = Pose::new(so3_exp(&Vec3::new(0.05, -0.1, 0.02)), Vec3::new(0.2, -0.1, 0.5));
        let assoc = (0..n)
            .map(|_| {
                let pc = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0), rng.random_range(4.0..10.0));
                let p = pose.inverse().transform(&pc);
                (p, project(&p, &pose, &cam()).unwrap())
            })
            .collect();
        (pose, assoc)
    }

    #[test]
    fn perfect_associations_leave_pose_unchanged() {
        let (pose, assoc) = scene(1, 50);
        let r = optimize_pose_only(&pose, &assoc, &cam(), &LmConfig::default()).unwrap();
        assert!((r.pose.translation() - pose.translation()).norm() < 1e-12);
        assert_eq!(r.outlier_count, 0);
    }

    #[test]
    fn recovers_from_perturbation() {
        let (pose, assoc) = scene(2, 80);
        let start = pose.retract(&Vector6::new(0.05, -0.05, 0.1, 0.02, -0.03, 0.01));
        let r = optimize_pose_only(&start, &assoc, &cam(), &LmConfig::default()).unwrap();
        assert!((r.pose.translation() - pose.translation()).norm() < 1e-8);
        assert_eq!(r.inlier_count, 80);
    }

    #[test]
    fn labels_exactly_the_wrong_associations() {
        let (pose, mut assoc) = scene(3, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut wrong = vec![false; 100];
        for i in (0..100).step_by(5) {
            // swap in a far-away pixel so the association is unambiguously wrong
            assoc[i].1 = Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let truth = project(&assoc[i].0, &pose, &cam()).unwrap();
            if (assoc[i].1 - truth).norm() < 10.0 {
                assoc[i].1.x = (truth.x + 60.0) % 640.0;
            }
            wrong[i] = true;
        }
        let start = pose.retract(&Vector6::new(0.02, 0.0, -0.03, 0.01, 0.0, 0.01));
        let r = optimize_pose_only(&start, &assoc, &cam(), &LmConfig::default()).unwrap();
        let labelled_out: Vec<bool> = r.inliers.iter().map(|&i| !i).collect();
        assert_eq!(labelled_out, wrong);
        assert!((r.pose.translation() - pose.translation()).norm() < 1e-8);
    }

    #[test]
    fn five_associations_are_too_few() {
        let (pose, assoc) = scene(4, 5);
        assert!(matches!(
            optimize_pose_only(&pose, &assoc, &cam(), &LmConfig::default()),
            Err(OptimError::TooFewMatches { got: 5, .. })
        ));
    }
}
