use super::descriptor::{Descriptor, VariantMismatch};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchThresholds {
    pub th_low: f64,
    pub th_high: f64,
}

impl MatchThresholds {
    pub fn new(th_low: f64, th_high: f64) -> Self {
        Self { th_low, th_high }
    }

    /// Defaults for driving sequences.
    pub fn kitti() -> Self {
        Self::new(2.0, 3.0)
    }

    /// Defaults for indoor MAV sequences.
    pub fn euroc() -> Self {
        Self::new(1.0, 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.th_low > 0.0 && self.th_low <= self.th_high && self.th_high.is_finite()
    }

    pub fn gate(&self, strict: bool) -> f64 {
        if strict {
            self.th_low
        } else {
            self.th_high
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub query: usize,
    pub train: usize,
    pub distance: f64,
}

/// Index of the nearest candidate, ties broken by lowest index.
pub(crate) fn nearest<'a, I>(d: &Descriptor, candidates: I) -> Option<(usize, f64)>
where
    I: IntoIterator<Item = (usize, &'a Descriptor)>,
{
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates {
        let dist = d.distance_unchecked(c);
        if best.is_none_or(|(bi, bd)| dist < bd || (dist == bd && i < bi)) {
            best = Some((i, dist));
        }
    }
    best
}

fn check_variants(query: &[Descriptor], train: &[Descriptor]) -> Result<(), VariantMismatch> {
    let Some(first) = query.first().or(train.first()) else { return Ok(()) };
    for d in query.iter().chain(train) {
        if !first.compatible(d) {
            return Err(VariantMismatch {
                left_kind: first.kind(),
                left_len: first.len(),
                right_kind: d.kind(),
                right_len: d.len(),
            });
        }
    }
    Ok(())
}

/// Mutual nearest neighbours within the selected threshold, sorted by query index.
pub fn match_descriptors(
    query: &[Descriptor],
    train: &[Descriptor],
    th: MatchThresholds,
    strict: bool,
) -> Result<Vec<Match>, VariantMismatch> {
    check_variants(query, train)?;
    let gate = th.gate(strict);
    let forward: Vec<Option<(usize, f64)>> =
        query.iter().map(|q| nearest(q, train.iter().enumerate())).collect();
    let backward: Vec<Option<(usize, f64)>> =
        train.iter().map(|t| nearest(t, query.iter().enumerate())).collect();
    Ok(forward
        .iter()
        .enumerate()
        .filter_map(|(qi, f)| {
            let (ti, dist) = (*f)?;
            (dist <= gate && backward[ti].map(|b| b.0) == Some(qi)).then_some(Match { query: qi, train: ti, distance: dist })
        })
        .collect())
}
