//! The SLAM map: frames, keyframes, map points and the covisibility graph.

mod store;

use std::collections::BTreeMap;
use std::sync::Arc;

pub use store::{Map, MapConfig, MapStats};

use crate::features::{Descriptor, FeatureSet};
use crate::geometry::{Point3, Pose};
use crate::place::BowVector;

pub type KeyFrameId = u64;
pub type MapPointId = u64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MapError {
    #[error("frame has no pose")]
    NoPose,
    #[error("keyframe {0} is not in the map")]
    DanglingKeyFrame(KeyFrameId),
    #[error("unknown keyframe {0}")]
    UnknownKeyFrame(KeyFrameId),
    #[error("unknown map point {0}")]
    UnknownMapPoint(MapPointId),
    #[error("keyframe {kf} has no keypoint {index}")]
    KeypointOutOfRange { kf: KeyFrameId, index: usize },
    #[error("keypoint {index} of keyframe {kf} already observes map point {point}")]
    KeypointTaken { kf: KeyFrameId, index: usize, point: MapPointId },
    #[error("map point {point} is already observed by keyframe {kf}")]
    DuplicateObservation { kf: KeyFrameId, point: MapPointId },
    #[error("a map point needs at least one observation")]
    NoObservations,
}

/// A tracked image: features, optional pose, and per-keypoint map point links.
#[derive(Clone, Debug)]
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    pub features: Arc<FeatureSet>,
    pub pose: Option<Pose>,
    pub links: Vec<Option<MapPointId>>,
    pub outliers: Vec<bool>,
}

impl Frame {
    pub fn new(index: usize, timestamp: f64, features: FeatureSet) -> Self {
        let n = features.len();
        Self { index, timestamp, features: Arc::new(features), pose: None, links: vec![None; n], outliers: vec![false; n] }
    }

    /// Inlier map point links.
    pub fn tracked(&self) -> impl Iterator<Item = (usize, MapPointId)> + '_ {
        self.links.iter().enumerate().filter_map(|(i, l)| l.filter(|_| !self.outliers[i]).map(|p| (i, p)))
    }

    pub fn tracked_count(&self) -> usize {
        self.tracked().count()
    }
}

#[derive(Clone, Debug)]
pub struct KeyFrame {
    pub id: KeyFrameId,
    pub frame_index: usize,
    pub timestamp: f64,
    pub features: Arc<FeatureSet>,
    /// World to camera.
    pub pose: Pose,
    pub links: Vec<Option<MapPointId>>,
    pub bow: BowVector,
}

impl KeyFrame {
    pub fn points(&self) -> impl Iterator<Item = (usize, MapPointId)> + '_ {
        self.links.iter().enumerate().filter_map(|(i, l)| l.map(|p| (i, p)))
    }

    pub fn point_count(&self) -> usize {
        self.points().count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapPoint {
    pub id: MapPointId,
    pub position: Point3,
    /// Observing keyframe → keypoint index.
    pub observations: BTreeMap<KeyFrameId, usize>,
    pub descriptor: Descriptor,
    pub found: u32,
    pub visible: u32,
}

/// What remains of a culled keyframe so the trajectory can still be rebuilt.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CulledKeyFrame {
    pub parent: KeyFrameId,
    /// Pose of the culled keyframe relative to its parent (`T_kf * T_parent⁻¹`).
    pub relative: Pose,
}
