use super::{EvalError, Trajectory};
use crate::geometry::{Pose, Sim3};
use crate::optim::{solve_rigid, solve_sim3};

pub const KITTI_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AlignMode {
    Sim3,
    Se3,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum RpeMode {
    FixedDelta(usize),
    LengthBased(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub max_dt: f64,
    pub align: AlignMode,
    pub rpe: RpeMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_dt: 0.02, align: AlignMode::Sim3, rpe: RpeMode::FixedDelta(1) }
    }
}

/// Greedy nearest-timestamp pairing; returns `(est index, gt index)` sorted by estimate index.
pub fn associate(est: &Trajectory, gt: &Trajectory, max_dt: f64) -> Result<Vec<(usize, usize)>, EvalError> {
    if est.is_empty() || gt.is_empty() {
        return Err(EvalError::Empty);
    }
    let gts = gt.timestamps();
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (i, (t, _)) in est.samples().iter().enumerate() {
        let start = gts.partition_point(|g| *g < t - max_dt);
        for (j, g) in gts.iter().enumerate().skip(start) {
            if *g > t + max_dt {
                break;
            }
            cands.push(((g - t).abs(), i, j));
        }
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_e = vec![false; est.len()];
    let mut used_g = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in cands {
        if !used_e[i] && !used_g[j] {
            used_e[i] = true;
            used_g[j] = true;
            pairs.push((i, j));
        }
    }
    if pairs.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    pairs.sort();
    Ok(pairs)
}

/// Transform taking estimated camera positions onto ground truth.
pub fn align(est: &Trajectory, gt: &Trajectory, pairs: &[(usize, usize)], mode: AlignMode) -> Result<Sim3, EvalError> {
    let pts: Vec<_> =
        pairs.iter().map(|&(i, j)| (est.samples()[i].1.translation(), gt.samples()[j].1.translation())).collect();
    Ok(match mode {
        AlignMode::Sim3 => solve_sim3(&pts)?,
        AlignMode::Se3 => solve_rigid(&pts)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AteResult {
    pub rmse: f64,
    pub residuals: Vec<f64>,
}

/// RMSE of position residuals after applying `alignment` to the estimate.
pub fn ate(est: &Trajectory, gt: &Trajectory, pairs: &[(usize, usize)], alignment: &Sim3) -> AteResult {
    let residuals: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| (alignment.transform(&est.samples()[i].1.translation()) - gt.samples()[j].1.translation()).norm())
        .collect();
    let rmse = if residuals.is_empty() {
        0.0
    } else {
        (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt()
    };
    AteResult { rmse, residuals }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpeResult {
    /// Mean translational error, percent of segment length.
    pub trans_percent: f64,
    /// Mean rotational error, degrees per metre.
    pub rot_deg_per_m: f64,
    pub trans_residuals: Vec<f64>,
    pub rot_residuals: Vec<f64>,
    /// Length-based evaluation found no long enough segment and fell back to consecutive pairs.
    pub fell_back: bool,
}

fn relative(a: &Pose, b: &Pose, scale: f64) -> Pose {
    let r = a.inverse() * *b;
    Pose::new(*r.rotation(), r.translation() * scale)
}

/// Relative pose error. Estimated translations are multiplied by `scale`
/// (the alignment scale for monocular runs).
pub fn rpe(est: &Trajectory, gt: &Trajectory, pairs: &[(usize, usize)], mode: &RpeMode, scale: f64) -> RpeResult {
    let e: Vec<Pose> = pairs.iter().map(|&(i, _)| est.samples()[i].1).collect();
    let g: Vec<Pose> = pairs.iter().map(|&(_, j)| gt.samples()[j].1).collect();
    let mut dist = vec![0.0; g.len()];
    for k in 1..g.len() {
        dist[k] = dist[k - 1] + (g[k].translation() - g[k - 1].translation()).norm();
    }
    let mut segments: Vec<(usize, usize, f64)> = Vec::new();
    let mut fell_back = false;
    match mode {
        RpeMode::LengthBased(lengths) => {
            for first in 0..g.len() {
                for &len in lengths {
                    let target = dist[first] + len;
                    if let Some(mut last) = (first..g.len()).find(|&k| dist[k] >= target) {
                        if last > first + 1 && target - dist[last - 1] < dist[last] - target {
                            last -= 1;
                        }
                        segments.push((first, last, len));
                    }
                }
            }
            if segments.is_empty() {
                fell_back = true;
            }
        }
        RpeMode::FixedDelta(_) => {}
    }
    if segments.is_empty() {
        let delta = match mode {
            RpeMode::FixedDelta(d) => (*d).max(1),
            RpeMode::LengthBased(_) => 1,
        };
        for first in 0..g.len().saturating_sub(delta) {
            let len = dist[first + delta] - dist[first];
            if len > 0.0 {
                segments.push((first, first + delta, len));
            }
        }
    }
    let mut trans_residuals = Vec::with_capacity(segments.len());
    let mut rot_residuals = Vec::with_capacity(segments.len());
    for (a, b, len) in segments {
        let gr = relative(&g[a], &g[b], 1.0);
        let er = relative(&e[a], &e[b], scale);
        let err = gr.inverse() * er;
        trans_residuals.push(err.translation().norm() / len * 100.0);
        rot_residuals.push(err.angle().to_degrees() / len);
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    RpeResult {
        trans_percent: mean(&trans_residuals),
        rot_deg_per_m: mean(&rot_residuals),
        trans_residuals,
        rot_residuals,
        fell_back,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub ate_rmse: f64,
    pub rpe_trans: f64,
    pub rpe_rot: f64,
    pub pairs: usize,
    pub alignment: Sim3,
    pub ate_residuals: Vec<f64>,
    pub rpe_trans_residuals: Vec<f64>,
    pub rpe_rot_residuals: Vec<f64>,
    pub rpe_fell_back: bool,
}

pub fn evaluate(est: &Trajectory, gt: &Trajectory, cfg: &EvalConfig) -> Result<MetricReport, EvalError> {
    let pairs = associate(est, gt, cfg.max_dt)?;
    let alignment = align(est, gt, &pairs, cfg.align)?;
    let a = ate(est, gt, &pairs, &alignment);
    let r = rpe(est, gt, &pairs, &cfg.rpe, alignment.scale());
    Ok(MetricReport {
        ate_rmse: a.rmse,
        rpe_trans: r.trans_percent,
        rpe_rot: r.rot_deg_per_m,
        pairs: pairs.len(),
        alignment,
        ate_residuals: a.residuals,
        rpe_trans_residuals: r.trans_residuals,
        rpe_rot_residuals: r.rot_residuals,
        rpe_fell_back: r.fell_back,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{so3_exp, Vec3, Vector7};
    use nalgebra::UnitQuaternion;

    fn wiggly(n: usize) -> Trajectory {
        Trajectory::new(
            (0..n)
                .map(|k| {
                    let s = k as f64;
                    let r = so3_exp(&Vec3::new(0.01 * s.sin(), 0.05 * s, 0.0));
                    (s * 0.1, Pose::new(r, Vec3::new(2.0 * (0.1 * s).cos(), 0.3 * (0.2 * s).sin(), 0.5 * s)))
                })
                .collect(),
        )
        .unwrap()
    }

    fn transformed(t: &Trajectory, s: &Sim3) -> Trajectory {
        Trajectory::new(
            t.samples()
                .iter()
                .map(|(ts, p)| (*ts, Pose::new(s.rotation() * p.rotation(), s.transform(&p.translation()))))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn association_examples() {
        let t = wiggly(10);
        assert_eq!(associate(&t, &t, 0.01).unwrap().len(), 10);
        let shifted = Trajectory::new(t.samples().iter().map(|(ts, p)| (ts + 0.005, *p)).collect()).unwrap();
        let p = associate(&t, &shifted, 0.01).unwrap();
        assert_eq!(p, (0..10).map(|i| (i, i)).collect::<Vec<_>>());
        let far = Trajectory::new(t.samples().iter().map(|(ts, p)| (ts + 100.0, *p)).collect()).unwrap();
        assert!(matches!(associate(&t, &far, 0.01), Err(EvalError::NoOverlap)));
    }

    #[test]
    fn identical_trajectories_score_zero() {
        let t = wiggly(50);
        let r = evaluate(&t, &t, &EvalConfig::default()).unwrap();
        assert!(r.ate_rmse < 1e-12 && r.rpe_trans < 1e-9 && r.rpe_rot < 1e-9);
    }

    #[test]
    fn scaled_and_shifted_estimate_aligns_away() {
        let gt = wiggly(40);
        let s = Sim3::new(UnitQuaternion::identity(), Vec3::new(1.0, 0.0, 0.0), 0.5).unwrap();
        let est = transformed(&gt, &s);
        let pairs = associate(&est, &gt, 0.01).unwrap();
        let a = align(&est, &gt, &pairs, AlignMode::Sim3).unwrap();
        assert!((a.scale() - 2.0).abs() < 1e-9);
        assert!(ate(&est, &gt, &pairs, &a).rmse < 1e-9);
    }

    #[test]
    fn random_similarity_recovered() {
        let gt = wiggly(30);
        let s = Sim3::exp(&Vector7::from_column_slice(&[1.0, -2.0, 0.5, 0.4, -0.3, 1.1, 0.7]));
        let est = transformed(&gt, &s.inverse());
        let pairs = associate(&est, &gt, 0.01).unwrap();
        let a = align(&est, &gt, &pairs, AlignMode::Sim3).unwrap();
        assert!((a.scale() - s.scale()).abs() < 1e-9);
        assert!((a.translation() - s.translation()).norm() < 1e-9);
        assert!((a.rotation_matrix() - s.rotation_matrix()).abs().max() < 1e-9);
    }

    #[test]
    fn single_offset_sample_gives_closed_form_rmse() {
        let gt = wiggly(16);
        let mut samples = gt.samples().to_vec();
        samples[7].1 = Pose::new(*samples[7].1.rotation(), samples[7].1.translation() + Vec3::new(0.0, 3.0, 0.0));
        let est = Trajectory::new(samples).unwrap();
        let pairs = associate(&est, &gt, 0.01).unwrap();
        let r = ate(&est, &gt, &pairs, &Sim3::identity());
        assert!((r.rmse - 3.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn lateral_drift_reads_one_percent() {
        // straight 1000 m line sampled every metre; estimate drifts sideways by 1% of distance
        let gt = Trajectory::new((0..1000).map(|k| (k as f64, Pose::from_translation(Vec3::new(k as f64, 0.0, 0.0)))).collect()).unwrap();
        let est = Trajectory::new(
            (0..1000).map(|k| (k as f64, Pose::from_translation(Vec3::new(k as f64, 0.01 * k as f64, 0.0)))).collect(),
        )
        .unwrap();
        let pairs = associate(&est, &gt, 0.1).unwrap();
        for len in KITTI_LENGTHS {
            let r = rpe(&est, &gt, &pairs, &RpeMode::LengthBased(vec![len]), 1.0);
            assert!(!r.fell_back);
            assert!((r.trans_percent - 1.0).abs() < 0.05, "{len}: {}", r.trans_percent);
        }
    }

    #[test]
    fn rotational_drift_reads_per_metre() {
        let gt = Trajectory::new((0..1000).map(|k| (k as f64, Pose::from_translation(Vec3::new(k as f64, 0.0, 0.0)))).collect()).unwrap();
        let est = Trajectory::new(
            (0..1000)
                .map(|k| {
                    let yaw = (0.01 * k as f64).to_radians();
                    (k as f64, Pose::new(so3_exp(&Vec3::new(0.0, 0.0, yaw)), Vec3::new(k as f64, 0.0, 0.0)))
                })
                .collect(),
        )
        .unwrap();
        let pairs = associate(&est, &gt, 0.1).unwrap();
        let r = rpe(&est, &gt, &pairs, &RpeMode::LengthBased(KITTI_LENGTHS.to_vec()), 1.0);
        assert!((r.rot_deg_per_m - 0.01).abs() < 1e-3, "{}", r.rot_deg_per_m);
    }

    #[test]
    fn short_sequence_falls_back() {
        let t = wiggly(20);
        let pairs = associate(&t, &t, 0.01).unwrap();
        let r = rpe(&t, &t, &pairs, &RpeMode::LengthBased(KITTI_LENGTHS.to_vec()), 1.0);
        assert!(r.fell_back);
        assert_eq!(r.trans_residuals.len(), 19);
    }

    #[test]
    fn ate_invariant_under_similarity_of_estimate_and_rpe_under_rigid_motion() {
        let gt = wiggly(40);
        let mut est_samples = gt.samples().to_vec();
        for (k, s) in est_samples.iter_mut().enumerate() {
            s.1 = Pose::new(*s.1.rotation(), s.1.translation() + Vec3::new(0.01 * (k as f64).sin(), 0.0, 0.02));
        }
        let est = Trajectory::new(est_samples).unwrap();
        let base = evaluate(&est, &gt, &EvalConfig::default()).unwrap();
        let s = Sim3::exp(&Vector7::from_column_slice(&[3.0, 1.0, -2.0, 0.2, 0.9, -0.4, -0.6]));
        let moved = evaluate(&transformed(&est, &s), &gt, &EvalConfig::default()).unwrap();
        assert!((base.ate_rmse - moved.ate_rmse).abs() < 1e-9);
        let rigid = Sim3::exp(&Vector7::from_column_slice(&[3.0, 1.0, -2.0, 0.2, 0.9, -0.4, 0.0]));
        let both = evaluate(&transformed(&est, &rigid), &transformed(&gt, &rigid), &EvalConfig::default()).unwrap();
        assert!((base.rpe_trans - both.rpe_trans).abs() < 1e-9);
        assert!((base.rpe_rot - both.rpe_rot).abs() < 1e-9);
    }
}
