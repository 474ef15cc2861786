//! Keypoints, descriptors, threshold-gated matching, the adaptive threshold
//! controller, and the pluggable feature providers.

mod adaptive;
mod descriptor;
mod grid;
mod io;
mod matching;
mod native;
mod synthetic;

use std::path::PathBuf;

pub use adaptive::{adapt_thresholds, inlier_margin, AdaptiveConfig};
pub use grid::KeypointGrid;
pub use descriptor::{descriptor_distance, hamming, l2, Descriptor, DescriptorKind, VariantMismatch};
pub use io::{parse_features, provider_from_files, read_features, write_features, FileProvider};
pub use matching::{match_descriptors, Match, MatchThresholds};
pub use native::{provider_native, DetectorConfig, NativeProvider};
pub use synthetic::{
    landmark_descriptor, provider_synthetic, SyntheticLandmark, SyntheticNoise, SyntheticObservation, SyntheticProvider,
    SYNTHETIC_DESCRIPTOR_LEN, SYNTHETIC_MAX_LANDMARKS,
};

use crate::imaging::GrayImage;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub response: f64,
    pub orientation: f64,
    pub octave: u32,
}

impl Keypoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y, response: 0.0, orientation: 0.0, octave: 0 }
    }

    pub fn pixel(&self) -> nalgebra::Vector2<f64> {
        nalgebra::Vector2::new(self.x, self.y)
    }
}

/// Keypoints and their descriptors, index-aligned.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureSet {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
}

impl FeatureSet {
    pub fn new(keypoints: Vec<Keypoint>, descriptors: Vec<Descriptor>) -> Self {
        assert_eq!(keypoints.len(), descriptors.len(), "keypoints and descriptors must align");
        Self { keypoints, descriptors }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    /// Variant and length shared by every descriptor, if any.
    pub fn descriptor_shape(&self) -> Option<(DescriptorKind, usize)> {
        self.descriptors.first().map(|d| (d.kind(), d.len()))
    }
}

/// What a provider gets to look at for one frame.
#[derive(Clone, Copy, Debug)]
pub struct FrameInput<'a> {
    pub index: usize,
    pub id: &'a str,
    pub image: Option<&'a GrayImage>,
}

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("no feature file for frame {id} (expected {path})")]
    MissingFrame { id: String, path: PathBuf },
    #[error("{path}:{line}: {message}")]
    MalformedFile { path: PathBuf, line: usize, message: String },
    #[error("image {width}x{height} is smaller than the {min}px descriptor patch")]
    ImageTooSmall { width: u32, height: u32, min: u32 },
    #[error("frame {0} has no image")]
    MissingImage(String),
    #[error("frame {0} is outside the synthetic sequence")]
    UnknownFrame(usize),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub trait FeatureProvider: Send + Sync {
    fn extract(&self, frame: FrameInput<'_>) -> Result<FeatureSet, FeatureError>;

    fn name(&self) -> &str;
}
