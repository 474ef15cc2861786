use std::collections::BTreeMap;

/// Sparse word histogram, L1-normalised (or empty).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BowVector {
    words: BTreeMap<u32, f64>,
}

impl BowVector {
    /// Normalises raw non-negative weights to unit L1 norm; zero entries are dropped.
    pub fn from_weights(raw: impl IntoIterator<Item = (u32, f64)>) -> Self {
        let mut words: BTreeMap<u32, f64> = BTreeMap::new();
        for (w, x) in raw {
            if x > 0.0 {
                *words.entry(w).or_insert(0.0) += x;
            }
        }
        let total: f64 = words.values().sum();
        if total > 0.0 {
            for v in words.values_mut() {
                *v /= total;
            }
        }
        Self { words }
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn get(&self, word: u32) -> f64 {
        self.words.get(&word).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.words.iter().map(|(&w, &x)| (w, x))
    }

    pub fn words(&self) -> impl Iterator<Item = u32> + '_ {
        self.words.keys().copied()
    }

    fn l2_norm(&self) -> f64 {
        self.words.values().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// `1 − ½‖â − b̂‖` on L2-normalised vectors; 0 when either side is empty.
pub fn l2_score(a: &BowVector, b: &BowVector) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let (na, nb) = (a.l2_norm(), b.l2_norm());
    let mut sq = 0.0;
    let (mut ia, mut ib) = (a.words.iter().peekable(), b.words.iter().peekable());
    loop {
        match (ia.peek(), ib.peek()) {
            (Some((wa, xa)), Some((wb, xb))) => {
                if wa == wb {
                    let d = *xa / na - *xb / nb;
                    sq += d * d;
                    ia.next();
                    ib.next();
                } else if wa < wb {
                    sq += (*xa / na).powi(2);
                    ia.next();
                } else {
                    sq += (*xb / nb).powi(2);
                    ib.next();
                }
            }
            (Some((_, xa)), None) => {
                sq += (*xa / na).powi(2);
                ia.next();
            }
            (None, Some((_, xb))) => {
                sq += (*xb / nb).powi(2);
                ib.next();
            }
            (None, None) => break,
        }
    }
    (1.0 - 0.5 * sq.sqrt()).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(a: &BowVector, b: &BowVector) -> f64 {
        if a.is_empty() || b.is_empty() {
            return 0.0;
        }
        let keys: std::collections::BTreeSet<u32> = a.words().chain(b.words()).collect();
        let na = a.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
        let d: f64 = keys.iter().map(|&k| (a.get(k) / na - b.get(k) / nb).powi(2)).sum();
        1.0 - 0.5 * d.sqrt()
    }

    #[test]
    fn score_examples() {
        let a = BowVector::from_weights([(1, 2.0), (5, 1.0)]);
        assert!((l2_score(&a, &a) - 1.0).abs() < 1e-15);
        let x = BowVector::from_weights([(1, 1.0)]);
        let y = BowVector::from_weights([(2, 1.0)]);
        assert!((l2_score(&x, &y) - (1.0 - 0.5 * 2f64.sqrt())).abs() < 1e-15);
        assert_eq!(l2_score(&BowVector::default(), &a), 0.0);
        assert!((a.iter().map(|w| w.1).sum::<f64>() - 1.0).abs() < 1e-15);
    }

    fn bow() -> impl Strategy<Value = Vec<(u32, f64)>> {
        prop::collection::vec((0u32..30, 0.01f64..5.0), 1..12)
    }

    proptest! {
        #[test]
        fn score_properties(a in bow(), b in bow(), s in 0.1f64..10.0) {
            let va = BowVector::from_weights(a.clone());
            let vb = BowVector::from_weights(b);
            let sc = l2_score(&va, &vb);
            prop_assert!((0.0..=1.0).contains(&sc));
            prop_assert!((sc - l2_score(&vb, &va)).abs() < 1e-12);
            prop_assert!((sc - brute(&va, &vb)).abs() < 1e-12);
            let scaled = BowVector::from_weights(a.into_iter().map(|(w, x)| (w, x * s)));
            prop_assert!((l2_score(&scaled, &vb) - sc).abs() < 1e-12);
        }
    }
}
