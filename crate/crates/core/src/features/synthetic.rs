use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Descriptor, FeatureError, FeatureProvider, FeatureSet, FrameInput, Keypoint};
use crate::geometry::{CameraIntrinsics, Pixel, Point3, Pose, Vec3};

pub const SYNTHETIC_DESCRIPTOR_LEN: usize = 128;
const CODE_SCALE: f64 = 10.0;
/// Number of distinct two-hot codes available for landmark ids.
pub const SYNTHETIC_MAX_LANDMARKS: usize = SYNTHETIC_DESCRIPTOR_LEN * (SYNTHETIC_DESCRIPTOR_LEN - 1) / 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SyntheticNoise {
    /// Gaussian pixel noise std on keypoint positions.
    pub pixel_sigma: f64,
    /// Expected norm of the descriptor noise vector.
    pub descriptor_sigma: f64,
    /// When set, descriptor noise ramps linearly from `descriptor_sigma` on the
    /// first frame to this value on the last.
    pub descriptor_sigma_end: Option<f64>,
}

impl SyntheticNoise {
    pub fn descriptor_sigma_at(&self, frame: usize, frames: usize) -> f64 {
        match self.descriptor_sigma_end {
            Some(end) if frames > 1 => {
                let t = frame.min(frames - 1) as f64 / (frames - 1) as f64;
                self.descriptor_sigma + (end - self.descriptor_sigma) * t
            }
            _ => self.descriptor_sigma,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticLandmark {
    pub id: u64,
    pub position: Point3,
}

/// Pair of active components encoding a landmark id.
fn landmark_code(id: u64) -> (usize, usize) {
    let mut k = (id as usize) % SYNTHETIC_MAX_LANDMARKS;
    let n = SYNTHETIC_DESCRIPTOR_LEN;
    for i in 0..n {
        let row = n - 1 - i;
        if k < row {
            return (i, i + 1 + k);
        }
        k -= row;
    }
    unreachable!()
}

/// Noiseless descriptor of a landmark.
pub fn landmark_descriptor(id: u64) -> Vec<f64> {
    let (i, j) = landmark_code(id);
    let mut d = vec![0.0; SYNTHETIC_DESCRIPTOR_LEN];
    d[i] = CODE_SCALE;
    d[j] = CODE_SCALE;
    d
}

fn mix(seed: u64, frame: usize, id: u64) -> u64 {
    let mut z = seed ^ (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ id.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticObservation {
    pub id: u64,
    pub pixel: Pixel,
}

/// Emits the projections of visible landmarks with id-encoding descriptors.
/// Keypoints of a frame are sorted by landmark id.
#[derive(Clone, Debug)]
pub struct SyntheticProvider {
    camera: CameraIntrinsics,
    landmarks: Vec<SyntheticLandmark>,
    poses: Vec<Pose>,
    noise: SyntheticNoise,
    seed: u64,
    observations: Vec<Vec<SyntheticObservation>>,
}

pub fn provider_synthetic(
    landmarks: &[SyntheticLandmark],
    camera: CameraIntrinsics,
    poses: &[Pose],
    noise: SyntheticNoise,
    seed: u64,
) -> SyntheticProvider {
    let mut p = SyntheticProvider {
        camera,
        landmarks: landmarks.to_vec(),
        poses: poses.to_vec(),
        noise,
        seed,
        observations: Vec::new(),
    };
    p.render(None);
    p
}

impl SyntheticProvider {
    /// Re-renders so that a landmark drifts along world y by `per_meter` times the
    /// distance travelled since it last came into view. Each visibility run is
    /// then consistent with a camera drifting the same way, while revisited
    /// landmarks disagree with the positions mapped on the earlier pass.
    pub fn with_drift(mut self, path_lengths: &[f64], per_meter: f64) -> Self {
        assert_eq!(path_lengths.len(), self.poses.len(), "one path length per frame");
        if per_meter != 0.0 {
            self.render(Some((path_lengths, per_meter)));
        }
        self
    }

    fn render(&mut self, drift: Option<(&[f64], f64)>) {
        let mut entry: HashMap<u64, f64> = HashMap::new();
        self.observations = Vec::with_capacity(self.poses.len());
        for (k, pose) in self.poses.iter().enumerate() {
            let mut seen = Vec::new();
            let mut next_entry = HashMap::new();
            for lm in &self.landmarks {
                let Some(px) = self.camera.project_camera(&pose.transform(&lm.position)) else { continue };
                if !self.camera.contains(&px) {
                    continue;
                }
                let px = match drift {
                    Some((s, rate)) => {
                        let start = *entry.get(&lm.id).unwrap_or(&s[k]);
                        next_entry.insert(lm.id, start);
                        let moved = lm.position - Vec3::new(0.0, rate * (s[k] - start), 0.0);
                        match self.camera.project_camera(&pose.transform(&moved)) {
                            Some(p) if self.camera.contains(&p) => p,
                            _ => continue,
                        }
                    }
                    None => px,
                };
                seen.push(SyntheticObservation { id: lm.id, pixel: px });
            }
            entry = next_entry;
            seen.sort_by_key(|o| o.id);
            self.observations.push(seen);
        }
    }

    pub fn frames(&self) -> usize {
        self.poses.len()
    }

    pub fn camera(&self) -> &CameraIntrinsics {
        &self.camera
    }

    /// Noiseless observations of a frame, sorted by landmark id.
    pub fn observations(&self, frame: usize) -> Option<&[SyntheticObservation]> {
        self.observations.get(frame).map(Vec::as_slice)
    }

    pub fn visible_ids(&self, frame: usize) -> Vec<u64> {
        self.observations(frame).map(|o| o.iter().map(|o| o.id).collect()).unwrap_or_default()
    }

    pub fn frame_features(&self, frame: usize) -> Result<FeatureSet, FeatureError> {
        let obs = self.observations.get(frame).ok_or(FeatureError::UnknownFrame(frame))?;
        let dsigma = self.noise.descriptor_sigma_at(frame, self.poses.len());
        let comp = Normal::new(0.0, dsigma / (SYNTHETIC_DESCRIPTOR_LEN as f64).sqrt()).expect("finite sigma");
        let pix = Normal::new(0.0, self.noise.pixel_sigma).expect("finite sigma");
        let mut keypoints = Vec::with_capacity(obs.len());
        let mut descriptors = Vec::with_capacity(obs.len());
        for o in obs {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, frame, o.id));
            let mut px = o.pixel;
            if self.noise.pixel_sigma > 0.0 {
                px += Pixel::new(pix.sample(&mut rng), pix.sample(&mut rng));
            }
            let mut d = landmark_descriptor(o.id);
            if dsigma > 0.0 {
                for v in &mut d {
                    *v += comp.sample(&mut rng);
                }
            }
            keypoints.push(Keypoint { x: px.x, y: px.y, response: 1.0, orientation: 0.0, octave: 0 });
            descriptors.push(Descriptor::Float(d));
        }
        Ok(FeatureSet::new(keypoints, descriptors))
    }
}

impl FeatureProvider for SyntheticProvider {
    fn extract(&self, frame: FrameInput<'_>) -> Result<FeatureSet, FeatureError> {
        self.frame_features(frame.index)
    }

    fn name(&self) -> &str {
        "synthetic"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{match_descriptors, MatchThresholds};
    use std::collections::HashSet;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(300.0, 300.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn scene() -> (Vec<SyntheticLandmark>, Vec<Pose>) {
        let lms = (0..200u64)
            .map(|id| {
                let x = (id % 20) as f64 - 10.0;
                let y = (id / 20) as f64 - 5.0;
                SyntheticLandmark { id, position: Point3::new(x * 0.9, y * 0.5, 8.0 + (id % 7) as f64 * 0.3) }
            })
            .collect();
        let poses = (0..5).map(|k| Pose::from_translation(Vec3::new(-0.4 * k as f64, 0.0, 0.0))).collect();
        (lms, poses)
    }

    #[test]
    fn codes_are_unique() {
        let mut seen = HashSet::new();
        for id in 0..SYNTHETIC_MAX_LANDMARKS as u64 {
            assert!(seen.insert(landmark_code(id)));
        }
        assert_eq!(landmark_code(0), (0, 1));
        assert_eq!(landmark_code(SYNTHETIC_MAX_LANDMARKS as u64 - 1), (126, 127));
    }

    #[test]
    fn landmark_behind_camera_is_absent() {
        let lms = vec![
            SyntheticLandmark { id: 1, position: Point3::new(0.0, 0.0, 5.0) },
            SyntheticLandmark { id: 2, position: Point3::new(0.0, 0.0, -5.0) },
        ];
        let p = provider_synthetic(&lms, cam(), &[Pose::identity()], SyntheticNoise::default(), 0);
        assert_eq!(p.visible_ids(0), vec![1]);
    }

    #[test]
    fn noiseless_matching_is_common_visibility() {
        let (lms, poses) = scene();
        let p = provider_synthetic(&lms, cam(), &poses, SyntheticNoise::default(), 3);
        let a = p.frame_features(0).unwrap();
        let b = p.frame_features(4).unwrap();
        let ia = p.visible_ids(0);
        let ib = p.visible_ids(4);
        let common: HashSet<u64> = ia.iter().filter(|i| ib.contains(i)).copied().collect();
        assert!(common.len() < ia.len(), "the test needs partial overlap");
        let m = match_descriptors(&a.descriptors, &b.descriptors, MatchThresholds::new(1.0, 1.5), false).unwrap();
        assert_eq!(m.len(), common.len());
        for mm in m {
            assert_eq!(ia[mm.query], ib[mm.train]);
        }
    }

    #[test]
    fn small_noise_keeps_association() {
        let (lms, poses) = scene();
        let noise = SyntheticNoise { descriptor_sigma: 0.1, ..Default::default() };
        let clean = provider_synthetic(&lms, cam(), &poses, SyntheticNoise::default(), 3);
        let noisy = provider_synthetic(&lms, cam(), &poses, noise, 3);
        let th = MatchThresholds::new(1.0, 1.5);
        let pairs = |p: &SyntheticProvider| {
            let a = p.frame_features(1).unwrap();
            let b = p.frame_features(3).unwrap();
            match_descriptors(&a.descriptors, &b.descriptors, th, false)
                .unwrap()
                .into_iter()
                .map(|m| (m.query, m.train))
                .collect::<Vec<_>>()
        };
        assert_eq!(pairs(&clean), pairs(&noisy));
        assert_ne!(clean.frame_features(1).unwrap(), noisy.frame_features(1).unwrap());
    }

    #[test]
    fn deterministic_and_sorted() {
        let (lms, poses) = scene();
        let noise = SyntheticNoise { descriptor_sigma: 0.5, pixel_sigma: 1.0, descriptor_sigma_end: Some(2.0) };
        let p = provider_synthetic(&lms, cam(), &poses, noise, 9);
        assert_eq!(p.frame_features(2).unwrap(), p.frame_features(2).unwrap());
        let ids = p.visible_ids(2);
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        assert!((noise.descriptor_sigma_at(4, 5) - 2.0).abs() < 1e-12);
        assert!(matches!(p.frame_features(5), Err(FeatureError::UnknownFrame(5))));
    }

    #[test]
    fn drift_moves_landmarks_with_time_in_view() {
        let (lms, poses) = scene();
        let s: Vec<f64> = (0..5).map(|k| 0.4 * k as f64).collect();
        let clean = provider_synthetic(&lms, cam(), &poses, SyntheticNoise::default(), 0);
        let drifted = provider_synthetic(&lms, cam(), &poses, SyntheticNoise::default(), 0).with_drift(&s, 0.5);
        // first frame: everything just entered view, no offset
        assert_eq!(clean.observations(0), drifted.observations(0));
        let a = clean.observations(4).unwrap();
        let b = drifted.observations(4).unwrap();
        let o = a.iter().find(|o| o.id == 50).unwrap();
        let d = b.iter().find(|o| o.id == 50).unwrap();
        let lm = lms[50].position;
        let depth = poses[4].transform(&lm).z;
        // moved up by 0.5 * 1.6 m: pixel y decreases by fy * 0.8 / depth
        assert!((o.pixel.y - d.pixel.y - 300.0 * 0.8 / depth).abs() < 1e-9);
    }
}
