use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{read_text, DatasetError, FrameRecord, SequenceSource};
use crate::eval::Trajectory;
use crate::features::{provider_synthetic, write_features, SyntheticLandmark, SyntheticNoise, SyntheticProvider, SYNTHETIC_MAX_LANDMARKS};
use crate::geometry::{CameraIntrinsics, Pixel, Point3, Pose, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathKind {
    Circle { radius: f64 },
    Line { length: f64 },
    /// Lemniscate through the origin, crossing itself once per lap.
    FigureEight { radius: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LandmarkLayout {
    /// Vertical cylinder wall around the origin.
    Cylinder { radius: f64, height: f64, count: usize },
    Box { min: [f64; 3], max: [f64; 3], count: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self { fx: 350.0, fy: 350.0, cx: 320.0, cy: 240.0, width: 640, height: 480 }
    }
}

impl CameraSpec {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics, DatasetError> {
        Ok(CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub path: PathKind,
    /// Number of traversals of the path; 1.0 on a circle ends one step short of the start.
    pub laps: f64,
    pub frames: usize,
    pub fps: f64,
    pub camera: CameraSpec,
    pub landmarks: LandmarkLayout,
    /// Frames seeing fewer landmarks get extra ones placed inside their view.
    pub min_visible: usize,
    /// Depth range for landmarks added by the visibility rule.
    pub fill_depth: [f64; 2],
    pub noise: SyntheticNoise,
    /// Vertical drift per metre travelled applied to landmarks while they stay in view.
    pub drift_per_meter: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            path: PathKind::Circle { radius: 4.0 },
            laps: 1.0,
            frames: 200,
            fps: 10.0,
            camera: CameraSpec::default(),
            landmarks: LandmarkLayout::Cylinder { radius: 10.0, height: 4.0, count: 1200 },
            min_visible: 0,
            fill_depth: [4.0, 12.0],
            noise: SyntheticNoise::default(),
            drift_per_meter: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::InvalidSpec(m.into()));
        if self.frames < 2 {
            return bad("at least 2 frames are required");
        }
        if !(self.fps > 0.0) || !(self.laps > 0.0) {
            return bad("fps and laps must be positive");
        }
        let size = match self.path {
            PathKind::Circle { radius } | PathKind::FigureEight { radius } => radius,
            PathKind::Line { length } => length,
        };
        if !(size > 0.0) {
            return bad("path length must be positive");
        }
        let count = match self.landmarks {
            LandmarkLayout::Cylinder { radius, height, count } => {
                if !(radius > 0.0 && height >= 0.0) {
                    return bad("cylinder needs a positive radius");
                }
                count
            }
            LandmarkLayout::Box { min, max, count } => {
                if (0..3).any(|i| !(min[i] <= max[i])) {
                    return bad("box min must not exceed max");
                }
                count
            }
        };
        if count > SYNTHETIC_MAX_LANDMARKS {
            return bad("too many landmarks for unique descriptor codes");
        }
        if !(self.fill_depth[0] > 0.0 && self.fill_depth[0] <= self.fill_depth[1]) {
            return bad("fill_depth must be a positive range");
        }
        if self.noise.pixel_sigma < 0.0 || self.noise.descriptor_sigma < 0.0 || self.noise.descriptor_sigma_end.is_some_and(|s| s < 0.0) {
            return bad("noise must be non-negative");
        }
        self.camera.intrinsics()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        serde_json::from_str(&read_text(path)?).map_err(|e| DatasetError::Malformed {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    fn position(&self, u: f64) -> Vec3 {
        let th = TAU * self.laps * u;
        match self.path {
            PathKind::Circle { radius } => Vec3::new(radius * th.cos(), 0.0, radius * th.sin()),
            PathKind::Line { length } => Vec3::new(length * self.laps * u, 0.0, 0.0),
            PathKind::FigureEight { radius } => Vec3::new(radius * th.sin(), 0.0, radius * th.sin() * th.cos()),
        }
    }

    fn camera_pose(&self, k: usize) -> Pose {
        let u = k as f64 / self.frames as f64;
        let c = self.position(u);
        let h = 1e-6;
        let tangent = self.position(u + h) - self.position(u - h);
        // view direction: tangent turned right in the horizontal plane
        let z = Vec3::new(tangent.z, 0.0, -tangent.x).normalize();
        let y = Vec3::new(0.0, 1.0, 0.0);
        let x = y.cross(&z);
        let r_wc = nalgebra::Matrix3::from_columns(&[x, y, z]);
        let r = r_wc.transpose();
        Pose::from_matrix(&r, -(r * c)).expect("orthonormal by construction")
    }
}

/// Ground-truth scene: landmarks, true camera poses (world to camera) and path lengths.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub spec: SyntheticSpec,
    pub camera: CameraIntrinsics,
    pub landmarks: Vec<SyntheticLandmark>,
    pub poses: Vec<Pose>,
    pub path_lengths: Vec<f64>,
}

impl SyntheticWorld {
    pub fn provider(&self) -> SyntheticProvider {
        provider_synthetic(&self.landmarks, self.camera, &self.poses, self.spec.noise, self.spec.seed)
            .with_drift(&self.path_lengths, self.spec.drift_per_meter)
    }

    pub fn ground_truth(&self) -> Trajectory {
        Trajectory::from_world_to_camera(self.timestamps().into_iter().zip(self.poses.iter().copied()))
            .expect("timestamps increase")
    }

    pub fn timestamps(&self) -> Vec<f64> {
        (0..self.poses.len()).map(|k| k as f64 / self.spec.fps).collect()
    }

    pub fn visible_count(&self, frame: usize) -> usize {
        let pose = &self.poses[frame];
        self.landmarks
            .iter()
            .filter(|l| self.camera.project_camera(&pose.transform(&l.position)).is_some_and(|p| self.camera.contains(&p)))
            .count()
    }
}

pub fn frame_id(k: usize) -> String {
    format!("{k:06}")
}

/// Deterministic world and its sequence; the source carries the exact ground truth.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(SequenceSource, SyntheticWorld), DatasetError> {
    spec.validate()?;
    let camera = spec.camera.intrinsics()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut positions: Vec<Point3> = match spec.landmarks {
        LandmarkLayout::Cylinder { radius, height, count } => (0..count)
            .map(|_| {
                let a = rng.random_range(0.0..TAU);
                let y = if height > 0.0 { rng.random_range(-height / 2.0..=height / 2.0) } else { 0.0 };
                Point3::new(radius * a.cos(), y, radius * a.sin())
            })
            .collect(),
        LandmarkLayout::Box { min, max, count } => (0..count)
            .map(|_| {
                let mut s = |i: usize| if max[i] > min[i] { rng.random_range(min[i]..max[i]) } else { min[i] };
                Point3::new(s(0), s(1), s(2))
            })
            .collect(),
    };
    let poses: Vec<Pose> = (0..spec.frames).map(|k| spec.camera_pose(k)).collect();

    if spec.min_visible > 0 {
        let margin = 8.0_f64.min(camera.width as f64 / 4.0).min(camera.height as f64 / 4.0);
        for pose in &poses {
            let visible = positions
                .iter()
                .filter(|p| camera.project_camera(&pose.transform(p)).is_some_and(|px| camera.contains(&px)))
                .count();
            let inv = pose.inverse();
            for _ in visible..spec.min_visible {
                let px = Pixel::new(
                    rng.random_range(margin..camera.width as f64 - margin),
                    rng.random_range(margin..camera.height as f64 - margin),
                );
                let depth = rng.random_range(spec.fill_depth[0]..=spec.fill_depth[1]);
                let ray = camera.unproject(&px);
                positions.push(inv.transform(&(ray / ray.z * depth)));
            }
        }
        if positions.len() > SYNTHETIC_MAX_LANDMARKS {
            return Err(DatasetError::InvalidSpec("visibility rule exceeded the landmark id budget".into()));
        }
    }

    let landmarks: Vec<SyntheticLandmark> =
        positions.into_iter().enumerate().map(|(i, p)| SyntheticLandmark { id: i as u64, position: p }).collect();
    let mut path_lengths = vec![0.0; poses.len()];
    for k in 1..poses.len() {
        path_lengths[k] = path_lengths[k - 1] + (poses[k].center() - poses[k - 1].center()).norm();
    }
    let world = SyntheticWorld { spec: spec.clone(), camera, landmarks, poses, path_lengths };
    let frames = world
        .timestamps()
        .into_iter()
        .enumerate()
        .map(|(k, t)| FrameRecord { id: frame_id(k), timestamp: t, image: None })
        .collect();
    let source = SequenceSource::new("synthetic", frames, camera, Some(world.ground_truth()))?;
    Ok((source, world))
}

/// File holding the generator spec inside a synthetic dataset directory.
pub const SYNTHETIC_SPEC_FILE: &str = "synthetic.json";

/// Writes `synthetic.json`, `groundtruth.tum` and `features/<frame_id>.feat`
/// under `dir`, so the sequence can be replayed from disk.
pub fn save_synthetic(dir: &Path, spec: &SyntheticSpec) -> Result<(SequenceSource, SyntheticWorld), DatasetError> {
    let (source, world) = generate_synthetic(spec)?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DatasetError::Io { path, source }
    };
    let features = dir.join("features");
    std::fs::create_dir_all(&features).map_err(io(&features))?;
    let json = serde_json::to_string_pretty(spec).expect("spec serializes");
    let spec_path = dir.join(SYNTHETIC_SPEC_FILE);
    std::fs::write(&spec_path, json + "\n").map_err(io(&spec_path))?;
    let gt_path = dir.join("groundtruth.tum");
    std::fs::write(&gt_path, world.ground_truth().to_tum()).map_err(io(&gt_path))?;
    let provider = world.provider();
    for (k, rec) in source.frames.iter().enumerate() {
        let set = provider.frame_features(k).map_err(|_| DatasetError::UnknownFrame(k))?;
        let path = features.join(format!("{}.feat", rec.id));
        std::fs::write(&path, write_features(&set)).map_err(io(&path))?;
    }
    Ok((source, world))
}

/// Regenerates the sequence described by `<dir>/synthetic.json`.
pub fn open_synthetic(dir: &Path) -> Result<(SequenceSource, SyntheticWorld), DatasetError> {
    let mut out = generate_synthetic(&SyntheticSpec::load(&dir.join(SYNTHETIC_SPEC_FILE))?)?;
    out.0.name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| out.0.name.clone());
    Ok(out)
}
