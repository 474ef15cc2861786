use nalgebra::{DMatrix, DVector, Matrix3, Matrix6x3, Vector3, Vector6};

use super::lm::{damp, run_lm, LmConfig, LmProblem, LmSummary};
use super::reprojection::residual_and_jacobian;
use super::{huber_cost, huber_weight, OptimError};
use crate::geometry::{CameraIntrinsics, Pixel, Point3, Pose};

/// Cost charged to an observation whose point falls behind its camera.
const BEHIND_PENALTY: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub pose: usize,
    pub point: usize,
    pub pixel: Pixel,
}

#[derive(Clone, Debug)]
pub struct BundleProblem {
    pub camera: CameraIntrinsics,
    pub poses: Vec<Pose>,
    pub pose_fixed: Vec<bool>,
    pub points: Vec<Point3>,
    pub point_fixed: Vec<bool>,
    pub observations: Vec<Observation>,
}

impl BundleProblem {
    pub fn new(camera: CameraIntrinsics) -> Self {
        Self {
            camera,
            poses: Vec::new(),
            pose_fixed: Vec::new(),
            points: Vec::new(),
            point_fixed: Vec::new(),
            observations: Vec::new(),
        }
    }

    pub fn add_pose(&mut self, pose: Pose, fixed: bool) -> usize {
        self.poses.push(pose);
        self.pose_fixed.push(fixed);
        self.poses.len() - 1
    }

    pub fn add_point(&mut self, p: Point3, fixed: bool) -> usize {
        self.points.push(p);
        self.point_fixed.push(fixed);
        self.points.len() - 1
    }

    pub fn observe(&mut self, pose: usize, point: usize, pixel: Pixel) {
        self.observations.push(Observation { pose, point, pixel });
    }

    fn validate(&self) -> Result<(), OptimError> {
        if self.pose_fixed.len() != self.poses.len() || self.point_fixed.len() != self.points.len() {
            return Err(OptimError::InvalidProblem("fixed masks do not match block counts".into()));
        }
        if !self.pose_fixed.iter().any(|&f| f) {
            return Err(OptimError::InvalidProblem("at least one pose must be fixed".into()));
        }
        if let Some(o) = self.observations.iter().find(|o| o.pose >= self.poses.len() || o.point >= self.points.len()) {
            return Err(OptimError::InvalidProblem(format!("observation references missing block {o:?}")));
        }
        Ok(())
    }

    /// Robustified cost with the given Huber threshold.
    pub fn cost(&self, delta: f64) -> f64 {
        self.observations
            .iter()
            .map(|o| match residual_and_jacobian(&self.poses[o.pose], &self.points[o.point], &o.pixel, &self.camera) {
                Some(r) => huber_cost(r.residual.norm_squared(), delta),
                None => BEHIND_PENALTY,
            })
            .sum()
    }

    /// Squared pixel residual per observation; `None` for points behind the camera.
    pub fn squared_errors(&self) -> Vec<Option<f64>> {
        self.observations
            .iter()
            .map(|o| {
                residual_and_jacobian(&self.poses[o.pose], &self.points[o.point], &o.pixel, &self.camera)
                    .map(|r| r.residual.norm_squared())
            })
            .collect()
    }

    pub fn mean_reprojection_error(&self) -> f64 {
        let errs = self.squared_errors();
        if errs.is_empty() {
            return 0.0;
        }
        errs.iter().map(|e| e.map_or(f64::INFINITY, f64::sqrt)).sum::<f64>() / errs.len() as f64
    }

    /// Levenberg–Marquardt with the point blocks eliminated by Schur complement.
    pub fn solve_lm(&mut self, cfg: &LmConfig) -> Result<LmSummary, OptimError> {
        self.validate()?;
        let mut solver = Solver::new(self, cfg.huber_delta);
        run_lm(&mut solver, cfg)
    }
}

struct Solver<'a> {
    problem: &'a mut BundleProblem,
    delta: f64,
    pose_block: Vec<Option<usize>>,
    point_block: Vec<Option<usize>>,
    n_pose: usize,
    hpp: DMatrix<f64>,
    bp: DVector<f64>,
    hll: Vec<Matrix3<f64>>,
    bl: Vec<Vector3<f64>>,
    /// Per free point: (pose block, H_pl block).
    hpl: Vec<Vec<(usize, Matrix6x3<f64>)>>,
}

impl<'a> Solver<'a> {
    fn new(problem: &'a mut BundleProblem, delta: f64) -> Self {
        let mut next = 0;
        let pose_block = problem
            .pose_fixed
            .iter()
            .map(|&f| {
                (!f).then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
        let n_pose = next;
        next = 0;
        let point_block: Vec<Option<usize>> = problem
            .point_fixed
            .iter()
            .map(|&f| {
                (!f).then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
        let n_point = next;
        Self {
            problem,
            delta,
            pose_block,
            point_block,
            n_pose,
            hpp: DMatrix::zeros(6 * n_pose, 6 * n_pose),
            bp: DVector::zeros(6 * n_pose),
            hll: vec![Matrix3::zeros(); n_point],
            bl: vec![Vector3::zeros(); n_point],
            hpl: vec![Vec::new(); n_point],
        }
    }
}

impl LmProblem for Solver<'_> {
    type Snapshot = (Vec<Pose>, Vec<Point3>);

    fn cost(&self) -> f64 {
        self.problem.cost(self.delta)
    }

    fn linearize(&mut self) -> f64 {
        self.hpp.fill(0.0);
        self.bp.fill(0.0);
        self.hll.iter_mut().for_each(|m| m.fill(0.0));
        self.bl.iter_mut().for_each(|v| v.fill(0.0));
        self.hpl.iter_mut().for_each(Vec::clear);
        let p = &*self.problem;
        for o in &p.observations {
            let (pb, lb) = (self.pose_block[o.pose], self.point_block[o.point]);
            if pb.is_none() && lb.is_none() {
                continue;
            }
            let Some(r) = residual_and_jacobian(&p.poses[o.pose], &p.points[o.point], &o.pixel, &p.camera) else {
                continue;
            };
            let w = huber_weight(r.residual.norm_squared(), self.delta);
            if let Some(i) = pb {
                let jt = r.d_pose.transpose() * w;
                let mut blk = self.hpp.fixed_view_mut::<6, 6>(6 * i, 6 * i);
                blk += jt * r.d_pose;
                let mut g = self.bp.fixed_rows_mut::<6>(6 * i);
                g -= jt * r.residual;
            }
            if let Some(j) = lb {
                let jt = r.d_point.transpose() * w;
                self.hll[j] += jt * r.d_point;
                self.bl[j] -= jt * r.residual;
                if let Some(i) = pb {
                    let cross = r.d_pose.transpose() * w * r.d_point;
                    match self.hpl[j].iter_mut().find(|(b, _)| *b == i) {
                        Some((_, m)) => *m += cross,
                        None => self.hpl[j].push((i, cross)),
                    }
                }
            }
        }
        let gp = self.bp.amax();
        let gl = self.bl.iter().map(|v| v.amax()).fold(0.0, f64::max);
        gp.max(gl)
    }

    fn solve(&self, lambda: f64) -> Option<DVector<f64>> {
        let np = 6 * self.n_pose;
        let mut s = self.hpp.clone();
        damp(&mut s, lambda);
        let mut rhs = self.bp.clone();
        let mut hll_inv = Vec::with_capacity(self.hll.len());
        for (j, h) in self.hll.iter().enumerate() {
            let mut hd = *h;
            for k in 0..3 {
                hd[(k, k)] += lambda * h[(k, k)].max(1e-9);
            }
            let inv = hd.try_inverse()?;
            for (a, ha) in &self.hpl[j] {
                let t = ha * inv;
                let mut r = rhs.fixed_rows_mut::<6>(6 * a);
                r -= t * self.bl[j];
                for (b, hb) in &self.hpl[j] {
                    let mut blk = s.fixed_view_mut::<6, 6>(6 * a, 6 * b);
                    blk -= t * hb.transpose();
                }
            }
            hll_inv.push(inv);
        }
        let dp = if np > 0 { s.cholesky()?.solve(&rhs) } else { DVector::zeros(0) };
        let mut step = DVector::zeros(np + 3 * self.hll.len());
        step.rows_mut(0, np).copy_from(&dp);
        for (j, inv) in hll_inv.iter().enumerate() {
            let mut r = self.bl[j];
            for (a, ha) in &self.hpl[j] {
                r -= ha.transpose() * dp.fixed_rows::<6>(6 * a);
            }
            step.fixed_rows_mut::<3>(np + 3 * j).copy_from(&(inv * r));
        }
        step.iter().all(|v| v.is_finite()).then_some(step)
    }

    fn apply(&mut self, step: &DVector<f64>) {
        let np = 6 * self.n_pose;
        for (k, b) in self.pose_block.iter().enumerate() {
            if let Some(i) = b {
                let xi: Vector6<f64> = step.fixed_rows::<6>(6 * i).into();
                self.problem.poses[k] = self.problem.poses[k].retract(&xi);
            }
        }
        for (k, b) in self.point_block.iter().enumerate() {
            if let Some(j) = b {
                self.problem.points[k] += step.fixed_rows::<3>(np + 3 * j);
            }
        }
    }

    fn snapshot(&self) -> Self::Snapshot {
        (self.problem.poses.clone(), self.problem.points.clone())
    }

    fn restore(&mut self, snap: Self::Snapshot) {
        self.problem.poses = snap.0;
        self.problem.points = snap.1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, so3_exp, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(400.0, 400.0, 320.0, 240.0, 640, 480).unwrap()
    }

    /// Cameras on an arc looking at a cloud of points.
    fn synthetic(rng: &mut ChaCha8Rng, n_kf: usize, n_pts: usize) -> (Vec<Pose>, Vec<Point3>) {
        let poses: Vec<Pose> = (0..n_kf)
            .map(|i| {
                let a = -0.4 + 0.8 * i as f64 / (n_kf - 1).max(1) as f64;
                let r = so3_exp(&Vec3::new(0.0, -a, 0.0));
                let center = Vec3::new(8.0 * a.sin(), 0.1 * (i as f64).sin(), 8.0 - 8.0 * a.cos());
                Pose::new(r, -(r * center))
            })
            .collect();
        let points = (0..n_pts)
            .map(|_| Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0), rng.random_range(6.0..12.0)))
            .collect();
        (poses, points)
    }

    fn build(poses: &[Pose], points: &[Point3], noise: f64, rng: &mut ChaCha8Rng) -> BundleProblem {
        let mut p = BundleProblem::new(cam());
        let gauss = Normal::new(0.0, noise.max(1e-300)).unwrap();
        for (i, pose) in poses.iter().enumerate() {
            p.add_pose(*pose, i == 0);
        }
        for x in points {
            p.add_point(*x, false);
        }
        for (i, pose) in poses.iter().enumerate() {
            for (j, x) in points.iter().enumerate() {
                if let Some(px) = project(x, pose, &cam()).filter(|px| cam().contains(px)) {
                    let n = if noise > 0.0 { Pixel::new(gauss.sample(rng), gauss.sample(rng)) } else { Pixel::zeros() };
                    p.observe(i, j, px + n);
                }
            }
        }
        p
    }

    fn perturb(p: &mut BundleProblem, rng: &mut ChaCha8Rng, rot: f64, trans: f64) {
        for i in 1..p.poses.len() {
            let w = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let t = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let xi = Vector6::new(t.x, t.y, t.z, 0.0, 0.0, 0.0).normalize() * trans;
            let mut xi = xi;
            xi.fixed_rows_mut::<3>(3).copy_from(&(w.normalize() * rot));
            p.poses[i] = p.poses[i].retract(&xi);
        }
    }

    #[test]
    fn already_optimal_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (poses, points) = synthetic(&mut rng, 5, 60);
        let mut p = build(&poses, &points, 0.0, &mut rng);
        let before = p.poses.clone();
        let s = p.solve_lm(&LmConfig::default()).unwrap();
        assert!(s.iterations <= 1);
        assert!((s.final_cost - s.initial_cost).abs() < 1e-12);
        assert!(p.poses.iter().zip(&before).all(|(a, b)| (a.translation() - b.translation()).norm() < 1e-9));
    }

    #[test]
    fn noiseless_perturbed_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (poses, points) = synthetic(&mut rng, 8, 150);
        let mut p = build(&poses, &points, 0.0, &mut rng);
        perturb(&mut p, &mut rng, 0.05, 0.1);
        let fixed = p.poses[0];
        let s = p.solve_lm(&LmConfig { max_iters: 100, ..Default::default() }).unwrap();
        assert!(s.cost_history.windows(2).all(|w| w[1] < w[0]));
        assert!(p.mean_reprojection_error() < 1e-6, "mean error {}", p.mean_reprojection_error());
        assert_eq!(p.poses[0], fixed);
    }

    #[test]
    fn noisy_residual_matches_noise_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (poses, points) = synthetic(&mut rng, 20, 500);
        let mut p = build(&poses, &points, 1.0, &mut rng);
        p.solve_lm(&LmConfig { max_iters: 100, ..Default::default() }).unwrap();
        let errs = p.squared_errors();
        let rms_per_axis = (errs.iter().map(|e| e.unwrap()).sum::<f64>() / (2.0 * errs.len() as f64)).sqrt();
        assert!((rms_per_axis - 1.0).abs() < 0.1, "rms {rms_per_axis}");
    }

    #[test]
    fn fixed_point_blocks_are_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (poses, points) = synthetic(&mut rng, 4, 40);
        let mut p = build(&poses, &points, 0.0, &mut rng);
        p.point_fixed[0] = true;
        p.points[1] += Vec3::new(0.05, 0.0, 0.0);
        let before = p.points[0];
        p.solve_lm(&LmConfig::default()).unwrap();
        assert_eq!(p.points[0], before);
    }

    #[test]
    fn requires_a_fixed_pose() {
        let mut p = BundleProblem::new(cam());
        p.add_pose(Pose::identity(), false);
        assert!(p.solve_lm(&LmConfig::default()).is_err());
    }
}
