use super::matching::MatchThresholds;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptiveConfig {
    pub th_min: f64,
    pub th_max: f64,
    pub ratio_floor: f64,
    pub ratio_ceil: f64,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self { th_min: 1.0, th_max: 3.0, ratio_floor: 0.5, ratio_ceil: 0.9 }
    }
}

impl AdaptiveConfig {
    pub fn is_valid(&self) -> bool {
        self.th_min > 0.0
            && self.th_min < self.th_max
            && 0.0 <= self.ratio_floor
            && self.ratio_floor < self.ratio_ceil
            && self.ratio_ceil <= 1.0
    }
}

/// Fraction of tracked map points that survived as inliers.
pub fn inlier_margin(map_point_count: usize, outlier_count: usize) -> f64 {
    let out = outlier_count.min(map_point_count);
    (map_point_count - out) as f64 / map_point_count.max(1) as f64
}

/// Thresholds loosen as outliers approach the map-point count and tighten as the margin grows.
pub fn adapt_thresholds(map_point_count: usize, outlier_count: usize, cfg: &AdaptiveConfig) -> MatchThresholds {
    if map_point_count == 0 {
        return MatchThresholds::new(cfg.th_max, cfg.th_max);
    }
    let margin = inlier_margin(map_point_count, outlier_count);
    let t = ((margin - cfg.ratio_floor) / (cfg.ratio_ceil - cfg.ratio_floor)).clamp(0.0, 1.0);
    let th_low = (cfg.th_max + t * (cfg.th_min - cfg.th_max)).clamp(cfg.th_min, cfg.th_max);
    let th_high = (1.5 * th_low).clamp(cfg.th_min, cfg.th_max);
    MatchThresholds::new(th_low, th_high)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CFG: AdaptiveConfig = AdaptiveConfig { th_min: 1.0, th_max: 3.0, ratio_floor: 0.5, ratio_ceil: 0.9 };

    #[test]
    fn saturation_and_midpoint() {
        assert_eq!(adapt_thresholds(100, 5, &CFG).th_low, CFG.th_min);
        assert_eq!(adapt_thresholds(100, 60, &CFG).th_low, CFG.th_max);
        // margin 0.7 sits halfway along the ramp
        let mid = adapt_thresholds(100, 30, &CFG).th_low;
        assert!((mid - 2.0).abs() < 1e-12);
        assert_eq!(adapt_thresholds(0, 0, &CFG), MatchThresholds::new(3.0, 3.0));
    }

    #[test]
    fn high_is_one_and_a_half_low_when_unclamped() {
        let th = adapt_thresholds(100, 5, &CFG);
        assert_eq!(th.th_high, 1.5);
        assert!(th.is_valid());
    }

    proptest! {
        #[test]
        fn monotone_and_bounded(mp in 1usize..500, a in 0usize..500, b in 0usize..500) {
            let (o1, o2) = (a.min(mp).max(b.min(mp)), a.min(mp).min(b.min(mp)));
            // o1 ≥ o2 so margin1 ≤ margin2
            let t1 = adapt_thresholds(mp, o1, &CFG);
            let t2 = adapt_thresholds(mp, o2, &CFG);
            prop_assert!(t1.th_low >= t2.th_low);
            for t in [t1, t2] {
                prop_assert!(t.th_low >= CFG.th_min && t.th_low <= CFG.th_max);
                prop_assert!(t.th_high >= CFG.th_min && t.th_high <= CFG.th_max);
                prop_assert!(t.th_low <= t.th_high);
            }
        }
    }
}
