//! Image distortions for robustness studies and front-end match-quality metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::{Keypoint, Match};
use crate::imaging::GrayImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Quantile {
    Q1,
    Q3,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum DistortionSpec {
    Gamma(f64),
    QuantileTruncate(Quantile),
    SaltPepper { p: f64, seed: u64 },
    FrameSkip(usize),
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid distortion: {0}")]
    InvalidSpec(String),
    #[error("no ground-truth correspondence available")]
    NoGroundTruth,
}

impl DistortionSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let ok = match *self {
            DistortionSpec::Gamma(g) => g > 0.0 && g.is_finite(),
            DistortionSpec::QuantileTruncate(_) => true,
            DistortionSpec::SaltPepper { p, .. } => (0.0..=1.0).contains(&p),
            DistortionSpec::FrameSkip(n) => n >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(HarnessError::InvalidSpec(format!("{self:?}")))
        }
    }

    /// Applies an image-level distortion. Salt-and-pepper noise is reseeded per
    /// frame so that consecutive frames get independent corruption. Frame
    /// skipping leaves images alone.
    pub fn apply(&self, img: &GrayImage, frame_index: usize) -> GrayImage {
        match *self {
            DistortionSpec::Gamma(g) => gamma_transform(img, g),
            DistortionSpec::QuantileTruncate(q) => quantile_truncate(img, q),
            DistortionSpec::SaltPepper { p, seed } => {
                salt_pepper(img, p, seed ^ (frame_index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
            }
            DistortionSpec::FrameSkip(_) => img.clone(),
        }
    }
}

pub fn gamma_transform(img: &GrayImage, gamma: f64) -> GrayImage {
    img.map(|v| v.powf(gamma))
}

/// Linearly interpolated percentile of a non-empty sample, `q` in `[0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Clamp level whose interpolated percentile is unchanged by the clamp itself:
/// the percentile when it falls on a sample, otherwise the bracketing sample on
/// the side the clamp moves towards.
fn truncation_level(values: &[f64], q: f64, lift: bool) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    if lift {
        v[hi]
    } else {
        v[lo]
    }
}

/// Q1 lifts everything below the 25th percentile to it; Q3 caps everything above
/// the 75th. Applying either twice changes nothing.
pub fn quantile_truncate(img: &GrayImage, which: Quantile) -> GrayImage {
    if img.pixels().is_empty() {
        return img.clone();
    }
    match which {
        Quantile::Q1 => {
            let q = truncation_level(img.pixels(), 0.25, true);
            img.map(|v| v.max(q))
        }
        Quantile::Q3 => {
            let q = truncation_level(img.pixels(), 0.75, false);
            img.map(|v| v.min(q))
        }
    }
}

pub fn salt_pepper(img: &GrayImage, p: f64, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    img.map(|v| {
        let hit = rng.random::<f64>() < p;
        let salt = rng.random::<bool>();
        if hit {
            if salt {
                1.0
            } else {
                0.0
            }
        } else {
            v
        }
    })
}

/// Keeps every `n`-th element starting with the first.
pub fn skip_frames<T: Clone>(sequence: &[T], n: usize) -> Vec<T> {
    sequence.iter().step_by(n.max(1)).cloned().collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchQuality {
    pub precision: f64,
    /// Mean distance of matched query keypoints from their centroid over the image diagonal.
    pub spread: f64,
    /// Set when there were no matches and `precision` is a placeholder.
    pub empty: bool,
}

/// `truth[q]` is the correct train index for query keypoint `q`, if it has one.
pub fn match_quality(
    matches: &[Match],
    truth: &[Option<usize>],
    query_keypoints: &[Keypoint],
    width: u32,
    height: u32,
) -> Result<MatchQuality, HarnessError> {
    if truth.is_empty() || truth.iter().all(Option::is_none) {
        return Err(HarnessError::NoGroundTruth);
    }
    if matches.is_empty() {
        return Ok(MatchQuality { precision: 0.0, spread: 0.0, empty: true });
    }
    let correct = matches.iter().filter(|m| truth.get(m.query).copied().flatten() == Some(m.train)).count();
    let pts: Vec<(f64, f64)> = matches.iter().map(|m| (query_keypoints[m.query].x, query_keypoints[m.query].y)).collect();
    let n = pts.len() as f64;
    let (cx, cy) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0 / n, b + p.1 / n));
    let mean = pts.iter().map(|p| (p.0 - cx).hypot(p.1 - cy)).sum::<f64>() / n;
    let diag = f64::from(width).hypot(f64::from(height));
    Ok(MatchQuality { precision: correct as f64 / n, spread: mean / diag, empty: false })
}
