use std::path::Path;

use super::{image_size, list_images, read_text, DatasetError, FrameRecord, SequenceSource};
use crate::eval::Trajectory;
use crate::geometry::CameraIntrinsics;

const DEFAULT_FPS: f64 = 10.0;

fn parse_calib(text: &str, path: &Path, width: u32, height: u32) -> Result<CameraIntrinsics, DatasetError> {
    for (i, line) in text.lines().enumerate() {
        let Some(rest) = line.trim().strip_prefix("P0:") else { continue };
        let err = |message: String| DatasetError::MalformedCalib { path: path.to_path_buf(), line: i + 1, message };
        let v: Vec<f64> = rest
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad number '{t}'"))))
            .collect::<Result<_, _>>()?;
        if v.len() != 12 {
            return Err(err(format!("P0 needs 12 values, found {}", v.len())));
        }
        return CameraIntrinsics::new(v[0], v[5], v[2], v[6], width, height).map_err(|e| err(e.to_string()));
    }
    Err(DatasetError::MalformedCalib { path: path.to_path_buf(), line: 0, message: "no P0 entry".into() })
}

/// Opens a KITTI odometry sequence: `image_0/` (or `images/`), `calib.txt`,
/// optional `times.txt` and optional `poses.txt` ground truth.
pub fn open_kitti(dir: &Path) -> Result<SequenceSource, DatasetError> {
    let img_dir = ["image_0", "images"]
        .iter()
        .map(|d| dir.join(d))
        .find(|p| p.is_dir())
        .ok_or_else(|| DatasetError::MissingImages { path: dir.join("image_0") })?;
    let images = list_images(&img_dir)?;
    let (w, h) = image_size(&images[0])?;

    let calib_path = dir.join("calib.txt");
    let calib_text = std::fs::read_to_string(&calib_path).map_err(|e| DatasetError::MalformedCalib {
        path: calib_path.clone(),
        line: 0,
        message: e.to_string(),
    })?;
    let camera = parse_calib(&calib_text, &calib_path, w, h)?;

    let times_path = dir.join("times.txt");
    let timestamps: Vec<f64> = if times_path.exists() {
        let text = read_text(&times_path)?;
        let mut ts = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            ts.push(line.trim().parse().map_err(|_| DatasetError::Malformed {
                path: times_path.clone(),
                line: i + 1,
                message: format!("bad timestamp '{}'", line.trim()),
            })?);
        }
        if ts.len() != images.len() {
            return Err(DatasetError::Malformed {
                path: times_path,
                line: ts.len(),
                message: format!("{} timestamps for {} images", ts.len(), images.len()),
            });
        }
        ts
    } else {
        (0..images.len()).map(|k| k as f64 / DEFAULT_FPS).collect()
    };

    let poses_path = dir.join("poses.txt");
    let ground_truth = if poses_path.exists() {
        Some(Trajectory::parse_kitti(&read_text(&poses_path)?, Some(&timestamps), &poses_path)?)
    } else {
        None
    };

    let frames = images
        .into_iter()
        .zip(&timestamps)
        .map(|(p, &t)| FrameRecord {
            id: p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            timestamp: t,
            image: Some(p),
        })
        .collect();
    let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "kitti".into());
    SequenceSource::new(name, frames, camera, ground_truth)
}
