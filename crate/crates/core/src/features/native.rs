//! FAST-9 corners over an image pyramid with rotated 256-bit BRIEF descriptors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Descriptor, FeatureError, FeatureProvider, FeatureSet, FrameInput, Keypoint};
use crate::imaging::GrayImage;

const PATCH_RADIUS: i32 = 15;
/// Distance from the border where descriptors stay inside the image after rotation.
const BORDER: u32 = 22;
const CIRCLE: [(i32, i32); 16] = [
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorConfig {
    /// Intensity difference for the segment test, in `[0, 1]` units.
    pub fast_threshold: f64,
    pub levels: u32,
    pub max_features: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { fast_threshold: 0.08, levels: 3, max_features: 1000, seed: 0x5eed }
    }
}

#[derive(Clone, Debug)]
pub struct NativeProvider {
    cfg: DetectorConfig,
    pattern: Vec<[(f64, f64); 2]>,
}

pub fn provider_native(cfg: DetectorConfig) -> NativeProvider {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, f64::from(2 * PATCH_RADIUS + 1) / 5.0).expect("valid sigma");
    let lim = f64::from(PATCH_RADIUS - 2);
    let mut sample = || -> (f64, f64) {
        (normal.sample(&mut rng).clamp(-lim, lim), normal.sample(&mut rng).clamp(-lim, lim))
    };
    let pattern = (0..256).map(|_| [sample(), sample()]).collect();
    NativeProvider { cfg, pattern }
}

impl NativeProvider {
    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn detect(&self, image: &GrayImage) -> Result<FeatureSet, FeatureError> {
        let min = 2 * BORDER + 1;
        if image.width() < min || image.height() < min {
            return Err(FeatureError::ImageTooSmall { width: image.width(), height: image.height(), min });
        }
        let mut found: Vec<(Keypoint, Descriptor)> = Vec::new();
        let mut level = image.clone();
        for octave in 0..self.cfg.levels.max(1) {
            if octave > 0 {
                level = level.half();
                if level.width() < min || level.height() < min {
                    break;
                }
            }
            let smooth = box_blur(&level);
            let scale = f64::from(1u32 << octave);
            for (x, y, score) in self.fast(&level) {
                let angle = intensity_centroid_angle(&level, x, y);
                let desc = self.brief(&smooth, x, y, angle);
                let kp = Keypoint {
                    x: f64::from(x) * scale,
                    y: f64::from(y) * scale,
                    response: score,
                    orientation: angle,
                    octave,
                };
                found.push((kp, desc));
            }
        }
        found.sort_by(|a, b| {
            b.0.response
                .total_cmp(&a.0.response)
                .then(a.0.octave.cmp(&b.0.octave))
                .then(a.0.y.total_cmp(&b.0.y))
                .then(a.0.x.total_cmp(&b.0.x))
        });
        found.truncate(self.cfg.max_features);
        let (keypoints, descriptors) = found.into_iter().unzip();
        Ok(FeatureSet { keypoints, descriptors })
    }

    /// Segment-test corners with 3×3 non-maximum suppression.
    fn fast(&self, img: &GrayImage) -> Vec<(u32, u32, f64)> {
        let (w, h) = (img.width(), img.height());
        let t = self.cfg.fast_threshold;
        let mut score = vec![0.0f64; (w * h) as usize];
        for y in BORDER..h - BORDER {
            for x in BORDER..w - BORDER {
                let c = img.get(x, y);
                let ring: [f64; 16] =
                    CIRCLE.map(|(dx, dy)| img.get((x as i32 + dx) as u32, (y as i32 + dy) as u32));
                let brighter = ring.map(|v| v > c + t);
                let darker = ring.map(|v| v < c - t);
                if has_arc(&brighter, 9) || has_arc(&darker, 9) {
                    score[(y * w + x) as usize] = ring.iter().map(|v| ((v - c).abs() - t).max(0.0)).sum();
                }
            }
        }
        let mut out = Vec::new();
        for y in BORDER..h - BORDER {
            for x in BORDER..w - BORDER {
                let s = score[(y * w + x) as usize];
                if s <= 0.0 {
                    continue;
                }
                let mut is_max = true;
                'n: for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let o = score[((y as i32 + dy) as u32 * w + (x as i32 + dx) as u32) as usize];
                        // ties resolved toward the earlier raster position
                        if o > s || (o == s && (dy < 0 || (dy == 0 && dx < 0))) {
                            is_max = false;
                            break 'n;
                        }
                    }
                }
                if is_max {
                    out.push((x, y, s));
                }
            }
        }
        out
    }

    fn brief(&self, img: &GrayImage, x: u32, y: u32, angle: f64) -> Descriptor {
        let (s, c) = angle.sin_cos();
        let sample = |(px, py): (f64, f64)| -> f64 {
            let rx = (c * px - s * py).round() as i32;
            let ry = (s * px + c * py).round() as i32;
            img.get((x as i32 + rx) as u32, (y as i32 + ry) as u32)
        };
        let mut bytes = vec![0u8; 32];
        for (i, [a, b]) in self.pattern.iter().enumerate() {
            if sample(*a) < sample(*b) {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        Descriptor::Binary(bytes)
    }
}

fn has_arc(flags: &[bool; 16], n: usize) -> bool {
    let mut run = 0;
    for i in 0..16 + n {
        if flags[i % 16] {
            run += 1;
            if run >= n {
                return true;
            }
        } else {
            run = 0;
        }
    }
    false
}

fn intensity_centroid_angle(img: &GrayImage, x: u32, y: u32) -> f64 {
    let (mut m01, mut m10) = (0.0, 0.0);
    for dy in -PATCH_RADIUS..=PATCH_RADIUS {
        for dx in -PATCH_RADIUS..=PATCH_RADIUS {
            if dx * dx + dy * dy > PATCH_RADIUS * PATCH_RADIUS {
                continue;
            }
            let v = img.get((x as i32 + dx) as u32, (y as i32 + dy) as u32);
            m10 += f64::from(dx) * v;
            m01 += f64::from(dy) * v;
        }
    }
    m01.atan2(m10)
}

fn box_blur(img: &GrayImage) -> GrayImage {
    let (w, h) = (img.width() as i64, img.height() as i64);
    GrayImage::from_fn(img.width(), img.height(), |x, y| {
        let mut acc = 0.0;
        for dy in -2i64..=2 {
            for dx in -2i64..=2 {
                let xx = (x as i64 + dx).clamp(0, w - 1) as u32;
                let yy = (y as i64 + dy).clamp(0, h - 1) as u32;
                acc += img.get(xx, yy);
            }
        }
        acc / 25.0
    })
}

impl FeatureProvider for NativeProvider {
    fn extract(&self, frame: FrameInput<'_>) -> Result<FeatureSet, FeatureError> {
        let img = frame.image.ok_or_else(|| FeatureError::MissingImage(frame.id.to_string()))?;
        self.detect(img)
    }

    fn name(&self) -> &str {
        "native"
    }
}
