//! Sequence sources: KITTI and EuRoC style directories and the synthetic world.

mod euroc;
mod kitti;
mod synthetic;

use std::path::{Path, PathBuf};

pub use euroc::open_euroc;
pub use kitti::open_kitti;
pub use synthetic::{
    frame_id, generate_synthetic, open_synthetic, save_synthetic, SYNTHETIC_SPEC_FILE, CameraSpec, LandmarkLayout, PathKind, SyntheticSpec, SyntheticWorld,
};

use crate::eval::{EvalError, Trajectory};
use crate::geometry::{CameraIntrinsics, GeometryError};
use crate::imaging::{GrayImage, ImageError};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}:{line}: malformed calibration: {message}")]
    MalformedCalib { path: PathBuf, line: usize, message: String },
    #[error("no images found under {path}")]
    MissingImages { path: PathBuf },
    #[error("{path}:{line}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    GroundTruth(#[from] EvalError),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("frame {0} is out of range")]
    UnknownFrame(usize),
}

pub(crate) fn read_text(path: &Path) -> Result<String, DatasetError> {
    std::fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub id: String,
    pub timestamp: f64,
    /// `None` for synthetic frames, which have no pixels.
    pub image: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct SequenceSource {
    pub name: String,
    pub frames: Vec<FrameRecord>,
    pub camera: CameraIntrinsics,
    pub ground_truth: Option<Trajectory>,
}

impl SequenceSource {
    pub fn new(
        name: impl Into<String>,
        frames: Vec<FrameRecord>,
        camera: CameraIntrinsics,
        ground_truth: Option<Trajectory>,
    ) -> Result<Self, DatasetError> {
        camera.validate().map_err(|e| DatasetError::InvalidSpec(e.to_string()))?;
        if let Some(k) = frames.windows(2).position(|w| w[1].timestamp <= w[0].timestamp) {
            return Err(EvalError::NonMonotonic(k + 1).into());
        }
        Ok(Self { name: name.into(), frames, camera, ground_truth })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Decodes the grayscale image of frame `index`; `Ok(None)` for synthetic frames.
    pub fn load_image(&self, index: usize) -> Result<Option<GrayImage>, DatasetError> {
        let frame = self.frames.get(index).ok_or(DatasetError::UnknownFrame(index))?;
        match &frame.image {
            Some(path) => Ok(Some(GrayImage::load(path)?)),
            None => Ok(None),
        }
    }
}

/// Sorted image files (png/pgm) directly under `dir`.
pub(crate) fn list_images(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let rd = std::fs::read_dir(dir).map_err(|_| DatasetError::MissingImages { path: dir.to_path_buf() })?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(), Some("png" | "pgm"))
        })
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(DatasetError::MissingImages { path: dir.to_path_buf() });
    }
    Ok(out)
}

pub(crate) fn image_size(path: &Path) -> Result<(u32, u32), DatasetError> {
    image::image_dimensions(path)
        .map_err(|e| ImageError::Codec { path: path.to_path_buf(), message: e.to_string() }.into())
}

impl From<GeometryError> for DatasetError {
    fn from(e: GeometryError) -> Self {
        DatasetError::InvalidSpec(e.to_string())
    }
}
