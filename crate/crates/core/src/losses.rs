//! LIFT training objectives evaluated on precomputed descriptor vectors and
//! detector score maps, with analytic gradients.

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("score map is empty")]
    EmptyMap,
    #[error("score map has {got} values, expected {rows}x{cols}")]
    BadShape { rows: usize, cols: usize, got: usize },
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
}

/// Row-major detector score grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl ScoreMap {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, LossError> {
        if rows == 0 || cols == 0 {
            return Err(LossError::EmptyMap);
        }
        if values.len() != rows * cols {
            return Err(LossError::BadShape { rows, cols, got: values.len() });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self, LossError> {
        let values = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        Self::new(rows, cols, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        Self { values, ..*self }
    }

    /// Softmax weights `exp(β·s)/Σexp(β·s)`, stabilized by max subtraction.
    fn weights(&self, beta: f64) -> Vec<f64> {
        let m = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.values.iter().map(|v| (beta * (v - m)).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorLossConfig {
    pub gamma_balance: f64,
    pub margin_c: f64,
    pub alphas: [f64; 4],
    pub labels: [f64; 4],
    /// Sharpness of the soft maximum that reduces a score map to one score.
    pub softmax_beta: f64,
    pub softargmax_beta: f64,
}

impl Default for DetectorLossConfig {
    fn default() -> Self {
        Self {
            gamma_balance: 1.0,
            margin_c: 4.0,
            alphas: [1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 3.0 / 6.0],
            labels: [1.0, 1.0, 1.0, -1.0],
            softmax_beta: 1.0,
            softargmax_beta: 10.0,
        }
    }
}

impl DetectorLossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |m: &str| Err(LossError::InvalidConfig(m.to_string()));
        if (self.alphas.iter().sum::<f64>() - 1.0).abs() > 1e-12 || self.alphas.iter().any(|a| *a < 0.0) {
            return bad("alphas must be non-negative and sum to 1");
        }
        if self.labels.iter().any(|y| y.abs() != 1.0) || self.labels[3] != -1.0 {
            return bad("labels must be ±1 with the fourth label -1");
        }
        if !(self.gamma_balance >= 0.0 && self.margin_c > 0.0 && self.softmax_beta > 0.0 && self.softargmax_beta > 0.0) {
            return bad("gamma must be non-negative; margin and sharpness positive");
        }
        Ok(())
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<(), LossError> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(LossError::LengthMismatch(a.len(), b.len()))
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Softmax-weighted centroid `(x, y)` = (column, row).
pub fn softargmax(s: &ScoreMap, beta: f64) -> (f64, f64) {
    let w = s.weights(beta);
    let (mut x, mut y) = (0.0, 0.0);
    for (k, wk) in w.iter().enumerate() {
        x += wk * (k % s.cols) as f64;
        y += wk * (k / s.cols) as f64;
    }
    // the weights can sum to a few ulps above one
    (x.min((s.cols - 1) as f64), y.min((s.rows - 1) as f64))
}

/// Gradients of both softargmax coordinates with respect to every score.
pub fn softargmax_grad(s: &ScoreMap, beta: f64) -> (Vec<f64>, Vec<f64>) {
    let w = s.weights(beta);
    let (x, y) = softargmax(s, beta);
    let gx = w.iter().enumerate().map(|(k, wk)| beta * wk * ((k % s.cols) as f64 - x)).collect();
    let gy = w.iter().enumerate().map(|(k, wk)| beta * wk * ((k / s.cols) as f64 - y)).collect();
    (gx, gy)
}

/// Scalar soft maximum `log(Σ exp(β·s))/β` of a score map.
pub fn soft_max(s: &ScoreMap, beta: f64) -> f64 {
    let m = s.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + s.values.iter().map(|v| (beta * (v - m)).exp()).sum::<f64>().ln() / beta
}

pub fn loss_desc(dk: &[f64], dl: &[f64], relation: Relation, margin_c: f64) -> Result<f64, LossError> {
    check_len(dk, dl)?;
    let d = dist(dk, dl);
    Ok(match relation {
        Relation::Positive => d,
        Relation::Negative => (margin_c - d).max(0.0),
    })
}

/// Gradient of [`loss_desc`] with respect to `dk`; the gradient for `dl` is its negation.
pub fn loss_desc_grad(dk: &[f64], dl: &[f64], relation: Relation, margin_c: f64) -> Result<Vec<f64>, LossError> {
    check_len(dk, dl)?;
    let d = dist(dk, dl);
    let scale = match relation {
        Relation::Positive if d > 0.0 => 1.0 / d,
        Relation::Negative if d < margin_c && d > 0.0 => -1.0 / d,
        _ => 0.0,
    };
    Ok(dk.iter().zip(dl).map(|(a, b)| scale * (a - b)).collect())
}

pub fn loss_ori(d1: &[f64], d2: &[f64]) -> Result<f64, LossError> {
    loss_desc(d1, d2, Relation::Positive, 0.0)
}

pub fn loss_pair(d1: &[f64], d2: &[f64]) -> Result<f64, LossError> {
    loss_desc(d1, d2, Relation::Positive, 0.0)
}

/// Gradient of the plain descriptor distance with respect to the first argument.
pub fn distance_grad(d1: &[f64], d2: &[f64]) -> Result<Vec<f64>, LossError> {
    loss_desc_grad(d1, d2, Relation::Positive, 0.0)
}

pub fn loss_class(maps: &[ScoreMap; 4], cfg: &DetectorLossConfig) -> f64 {
    maps.iter()
        .enumerate()
        .map(|(i, m)| {
            let h = (1.0 - soft_max(m, cfg.softmax_beta) * cfg.labels[i]).max(0.0);
            cfg.alphas[i] * h * h
        })
        .sum()
}

/// Gradient of [`loss_class`] with respect to each map's scores.
pub fn loss_class_grad(maps: &[ScoreMap; 4], cfg: &DetectorLossConfig) -> [Vec<f64>; 4] {
    std::array::from_fn(|i| {
        let m = &maps[i];
        let h = (1.0 - soft_max(m, cfg.softmax_beta) * cfg.labels[i]).max(0.0);
        let outer = -2.0 * cfg.alphas[i] * h * cfg.labels[i];
        if outer == 0.0 {
            return vec![0.0; m.values.len()];
        }
        m.weights(cfg.softmax_beta).into_iter().map(|w| outer * w).collect()
    })
}

pub fn loss_det(class_loss: f64, pair_loss: f64, gamma_balance: f64) -> f64 {
    gamma_balance * class_loss + pair_loss
}

/// Full detector objective from the four score maps and the descriptors
/// taken at the softargmax locations of the first two.
pub fn loss_det_full(maps: &[ScoreMap; 4], d1: &[f64], d2: &[f64], cfg: &DetectorLossConfig) -> Result<f64, LossError> {
    Ok(loss_det(loss_class(maps, cfg), loss_pair(d1, d2)?, cfg.gamma_balance))
}

/// Max-norm relative disagreement between `analytic` and central differences of `f` at `x`.
pub fn grad_check(f: impl Fn(&[f64]) -> f64, analytic: &[f64], x: &[f64], step: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut worst: f64 = 0.0;
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    for k in 0..x.len() {
        xp[k] = x[k] + step;
        let fp = f(&xp);
        xp[k] = x[k] - step;
        let fm = f(&xp);
        xp[k] = x[k];
        let num = (fp - fm) / (2.0 * step);
        worst = worst.max((num - analytic[k]).abs() / scale);
    }
    worst
}

pub const GRAD_STEP: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, r: usize, c: usize) -> ScoreMap {
        ScoreMap::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn softargmax_examples() {
        let u = ScoreMap::new(5, 5, vec![0.3; 25]).unwrap();
        let (x, y) = softargmax(&u, 10.0);
        assert!((x - 2.0).abs() < 1e-12 && (y - 2.0).abs() < 1e-12);
        // peak in column 1, row 3
        let peak = ScoreMap::from_fn(5, 5, |r, c| if (r, c) == (3, 1) { 100.0 } else { 0.0 }).unwrap();
        let (x, y) = softargmax(&peak, 10.0);
        assert!((x - 1.0).abs() < 1e-6 && (y - 3.0).abs() < 1e-6);
    }

    #[test]
    fn desc_examples() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(loss_desc(&a, &a, Relation::Positive, 4.0).unwrap(), 0.0);
        assert_eq!(loss_desc(&[0.0, 0.0], &[3.0, 4.0], Relation::Negative, 4.0).unwrap(), 0.0);
        assert_eq!(loss_desc(&[0.0], &[1.0], Relation::Negative, 4.0).unwrap(), 3.0);
        assert!(loss_desc(&[0.0], &[1.0, 2.0], Relation::Positive, 4.0).is_err());
        assert!((loss_ori(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn class_examples() {
        let cfg = DetectorLossConfig::default();
        let high = ScoreMap::new(1, 1, vec![1.5]).unwrap();
        let low = ScoreMap::new(1, 1, vec![-1.0]).unwrap();
        assert_eq!(loss_class(&[high.clone(), high.clone(), high.clone(), low], &cfg), 0.0);
        let zero = ScoreMap::new(1, 1, vec![0.0]).unwrap();
        let l = loss_class(&[high.clone(), high.clone(), high, zero], &cfg);
        assert!((l - 0.5).abs() < 1e-15);
    }

    #[test]
    fn det_examples() {
        assert_eq!(loss_det(0.0, loss_pair(&[1.0], &[1.0]).unwrap(), 1.0), 0.0);
        assert_eq!(loss_det(0.7, 1.25, 0.0), 1.25);
        assert_eq!(loss_det(0.5, 1.0, 2.0), 2.0);
    }

    #[test]
    fn inactive_hinge_has_zero_gradient() {
        let cfg = DetectorLossConfig::default();
        let high = ScoreMap::new(2, 2, vec![3.0; 4]).unwrap();
        let low = ScoreMap::new(2, 2, vec![-3.0; 4]).unwrap();
        let g = loss_class_grad(&[high.clone(), high.clone(), high, low], &cfg);
        assert!(g.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = DetectorLossConfig::default();
        for _ in 0..20 {
            let a: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = loss_desc_grad(&a, &b, Relation::Positive, 4.0).unwrap();
            let e = grad_check(|x| loss_desc(x, &b, Relation::Positive, 4.0).unwrap(), &g, &a, GRAD_STEP);
            assert!(e < 1e-5, "desc {e}");

            let m = random_map(&mut rng, 5, 5);
            let (gx, gy) = softargmax_grad(&m, 10.0);
            let ex = grad_check(|v| softargmax(&m.with_values(v.to_vec()), 10.0).0, &gx, m.values(), GRAD_STEP);
            let ey = grad_check(|v| softargmax(&m.with_values(v.to_vec()), 10.0).1, &gy, m.values(), GRAD_STEP);
            assert!(ex < 1e-5 && ey < 1e-5, "softargmax {ex} {ey}");

            let maps: [ScoreMap; 4] = std::array::from_fn(|_| random_map(&mut rng, 4, 4));
            let g = loss_class_grad(&maps, &cfg);
            for i in 0..4 {
                let e = grad_check(
                    |v| {
                        let mut mm = maps.clone();
                        mm[i] = maps[i].with_values(v.to_vec());
                        loss_class(&mm, &cfg)
                    },
                    &g[i],
                    maps[i].values(),
                    GRAD_STEP,
                );
                assert!(e < 1e-5, "class map {i}: {e}");
            }
        }
    }

    proptest! {
        #[test]
        fn softargmax_stays_inside_and_is_shift_invariant(
            vals in prop::collection::vec(-5.0f64..5.0, 12), shift in -50.0f64..50.0, beta in 0.1f64..20.0
        ) {
            let m = ScoreMap::new(3, 4, vals.clone()).unwrap();
            let (x, y) = softargmax(&m, beta);
            prop_assert!((0.0..=3.0).contains(&x) && (0.0..=2.0).contains(&y));
            let shifted = m.with_values(vals.iter().map(|v| v + shift).collect());
            let (x2, y2) = softargmax(&shifted, beta);
            prop_assert!((x - x2).abs() < 1e-9 && (y - y2).abs() < 1e-9);
        }

        #[test]
        fn desc_losses_bounded_and_permutation_invariant(
            a in prop::collection::vec(-3.0f64..3.0, 8), b in prop::collection::vec(-3.0f64..3.0, 8), rot in 0usize..8
        ) {
            let neg = loss_desc(&a, &b, Relation::Negative, 4.0).unwrap();
            let pos = loss_desc(&a, &b, Relation::Positive, 4.0).unwrap();
            prop_assert!((0.0..=4.0).contains(&neg) && pos >= 0.0);
            let mut pa = a.clone();
            let mut pb = b.clone();
            pa.rotate_left(rot);
            pb.rotate_left(rot);
            prop_assert!((loss_desc(&pa, &pb, Relation::Positive, 4.0).unwrap() - pos).abs() < 1e-12);
        }

        #[test]
        fn large_beta_approaches_argmax(r in 0usize..4, c in 0usize..4, base in prop::collection::vec(0i32..5, 16)) {
            // integer-gap map with a unique maximum
            let vals: Vec<f64> = base.iter().enumerate()
                .map(|(k, v)| if k == r * 4 + c { 10.0 } else { f64::from(*v) }).collect();
            let (x, y) = softargmax(&ScoreMap::new(4, 4, vals).unwrap(), 100.0);
            prop_assert!((x - c as f64).abs() < 1e-3 && (y - r as f64).abs() < 1e-3);
        }
    }
}
