use nalgebra::{Matrix3, UnitQuaternion};

use super::OptimError;
use crate::geometry::{Point3, Sim3};

/// Relative size of the second singular value below which a point set counts as collinear.
const COLLINEAR_RATIO: f64 = 1e-10;

/// Closed-form similarity minimizing Σ‖bᵢ − s·R·aᵢ − t‖².
pub fn solve_sim3(pairs: &[(Point3, Point3)]) -> Result<Sim3, OptimError> {
    umeyama(pairs, true)
}

/// As [`solve_sim3`] with the scale pinned to one.
pub fn solve_rigid(pairs: &[(Point3, Point3)]) -> Result<Sim3, OptimError> {
    umeyama(pairs, false)
}

fn umeyama(pairs: &[(Point3, Point3)], with_scale: bool) -> Result<Sim3, OptimError> {
    if pairs.len() < 3 {
        return Err(OptimError::DegenerateConfiguration("fewer than three pairs"));
    }
    // a canonical order makes the floating-point sums independent of input order
    let mut sorted: Vec<&(Point3, Point3)> = pairs.iter().collect();
    sorted.sort_by(|x, y| {
        x.0.iter()
            .chain(x.1.iter())
            .zip(y.0.iter().chain(y.1.iter()))
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let n = sorted.len() as f64;
    let mu_a = sorted.iter().fold(Point3::zeros(), |acc, p| acc + p.0) / n;
    let mu_b = sorted.iter().fold(Point3::zeros(), |acc, p| acc + p.1) / n;
    let mut cov = Matrix3::zeros();
    let mut cov_a = Matrix3::zeros();
    let mut var_a = 0.0;
    for (a, b) in sorted.iter().map(|p| (p.0 - mu_a, p.1 - mu_b)) {
        cov += b * a.transpose();
        cov_a += a * a.transpose();
        var_a += a.norm_squared();
    }
    cov /= n;
    var_a /= n;
    let spread = cov_a.symmetric_eigenvalues();
    let mut ev: Vec<f64> = spread.iter().copied().collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    if ev[0] <= 0.0 || ev[1] <= COLLINEAR_RATIO * ev[0] {
        return Err(OptimError::DegenerateConfiguration("points are coincident or collinear"));
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut s_diag = nalgebra::Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * vt.determinant()) < 0.0 {
        s_diag[2] = -1.0;
    }
    let r = u * Matrix3::from_diagonal(&s_diag) * vt;
    let scale = if with_scale { svd.singular_values.dot(&s_diag) / var_a } else { 1.0 };
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(OptimError::DegenerateConfiguration("non-positive scale"));
    }
    let rot = UnitQuaternion::from_matrix(&r);
    let t = mu_b - scale * (rot * mu_a);
    Sim3::new(rot, t, scale).map_err(|_| OptimError::DegenerateConfiguration("non-positive scale"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{so3_exp, Vec3, Vector7};
    use proptest::prelude::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
        (0..n).map(|_| Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0))).collect()
    }

    fn residual(s: &Sim3, pairs: &[(Point3, Point3)]) -> f64 {
        pairs.iter().map(|(a, b)| (b - s.transform(a)).norm_squared()).sum()
    }

    #[test]
    fn recovers_known_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = Sim3::new(
            UnitQuaternion::from_axis_angle(&Vec3::z_axis(), std::f64::consts::FRAC_PI_2),
            Vec3::new(1.0, 0.0, 0.0),
            2.0,
        )
        .unwrap();
        let pairs: Vec<_> = cloud(&mut rng, 30).into_iter().map(|a| (a, truth.transform(&a))).collect();
        let s = solve_sim3(&pairs).unwrap();
        assert!((s.scale() - 2.0).abs() < 1e-9);
        assert!((s.rotation_matrix() - truth.rotation_matrix()).abs().max() < 1e-9);
        assert!((s.translation() - truth.translation()).norm() < 1e-9);
    }

    #[test]
    fn identity_and_degenerate_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pairs: Vec<_> = cloud(&mut rng, 10).into_iter().map(|a| (a, a)).collect();
        let s = solve_sim3(&pairs).unwrap();
        assert!((s.scale() - 1.0).abs() < 1e-12 && s.translation().norm() < 1e-12);
        assert!(solve_sim3(&pairs[..2]).is_err());
        let line: Vec<_> = (0..5).map(|i| (Vec3::new(i as f64, 0.0, 0.0), Vec3::new(0.0, i as f64, 0.0))).collect();
        assert!(solve_sim3(&line).is_err());
    }

    #[test]
    fn permutation_invariant_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pairs: Vec<_> = cloud(&mut rng, 40)
            .into_iter()
            .map(|a| {
                let n = Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.0);
                (a, a * 1.3 + n)
            })
            .collect();
        let s1 = solve_sim3(&pairs).unwrap();
        pairs.shuffle(&mut rng);
        let s2 = solve_sim3(&pairs).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn beats_random_similarities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = Sim3::exp(&Vector7::from_column_slice(&[0.5, -1.0, 2.0, 0.3, 0.1, -0.2, 0.4]));
        let pairs: Vec<_> = cloud(&mut rng, 25)
            .into_iter()
            .map(|a| {
                let n = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
                (a, truth.transform(&a) + n)
            })
            .collect();
        let best = residual(&solve_sim3(&pairs).unwrap(), &pairs);
        for _ in 0..1000 {
            let v = Vector7::from_fn(|_, _| rng.random_range(-0.05..0.05));
            let other = Sim3::exp(&v) * truth;
            assert!(best <= residual(&other, &pairs) + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn apply_then_recover(rx in -3.0f64..3.0, ry in -3.0f64..3.0, rz in -3.0f64..3.0,
                              tx in -10.0f64..10.0, ls in -2.0f64..2.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = Sim3::new(so3_exp(&(Vec3::new(rx, ry, rz) * 0.5)), Vec3::new(tx, -tx, 1.0), ls.exp()).unwrap();
            let pairs: Vec<_> = cloud(&mut rng, 12).into_iter().map(|a| (a, truth.transform(&a))).collect();
            let s = solve_sim3(&pairs).unwrap();
            prop_assert!((s.scale() - truth.scale()).abs() < 1e-9 * truth.scale().max(1.0));
            prop_assert!((s.rotation_matrix() - truth.rotation_matrix()).abs().max() < 1e-9);
            prop_assert!((s.translation() - truth.translation()).norm() < 1e-8);
        }
    }
}
