use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};

use super::{list_images, read_text, DatasetError, FrameRecord, SequenceSource};
use crate::eval::Trajectory;
use crate::geometry::{CameraIntrinsics, Pose, Vec3};

const QUAT_NORM_TOL: f64 = 1e-3;

fn yaml_list(text: &str, key: &str, path: &Path) -> Result<Vec<f64>, DatasetError> {
    for (i, line) in text.lines().enumerate() {
        let Some(rest) = line.trim().strip_prefix(key).and_then(|r| r.trim_start().strip_prefix(':')) else { continue };
        let err = |message: String| DatasetError::MalformedCalib { path: path.to_path_buf(), line: i + 1, message };
        let inner = rest.trim().trim_start_matches('[').trim_end_matches(']');
        return inner
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| err(format!("bad number '{}' in {key}", t.trim()))))
            .collect();
    }
    Err(DatasetError::MalformedCalib { path: path.to_path_buf(), line: 0, message: format!("missing '{key}'") })
}

fn parse_sensor(text: &str, path: &Path) -> Result<CameraIntrinsics, DatasetError> {
    let k = yaml_list(text, "intrinsics", path)?;
    let res = yaml_list(text, "resolution", path)?;
    let bad = |message: String| DatasetError::MalformedCalib { path: path.to_path_buf(), line: 0, message };
    if k.len() != 4 || res.len() != 2 {
        return Err(bad("intrinsics needs 4 values and resolution 2".into()));
    }
    CameraIntrinsics::new(k[0], k[1], k[2], k[3], res[0] as u32, res[1] as u32).map_err(|e| bad(e.to_string()))
}

fn csv_rows(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| (i + 1, l.split(',').map(str::trim).collect()))
}

fn ns_to_s(tok: &str, path: &Path, line: usize) -> Result<f64, DatasetError> {
    tok.parse::<u64>().map(|ns| ns as f64 * 1e-9).map_err(|_| DatasetError::Malformed {
        path: path.to_path_buf(),
        line,
        message: format!("bad nanosecond timestamp '{tok}'"),
    })
}

fn parse_groundtruth(text: &str, path: &Path) -> Result<Trajectory, DatasetError> {
    let mut samples: Vec<(f64, Pose)> = Vec::new();
    for (line, row) in csv_rows(text) {
        let err = |message: String| DatasetError::Malformed { path: path.to_path_buf(), line, message };
        if row.len() < 8 {
            return Err(err(format!("expected at least 8 columns, found {}", row.len())));
        }
        let t = ns_to_s(row[0], path, line)?;
        let v: Vec<f64> =
            row[1..8].iter().map(|s| s.parse().map_err(|_| err(format!("bad number '{s}'")))).collect::<Result<_, _>>()?;
        let q = Quaternion::new(v[3], v[4], v[5], v[6]);
        if (q.norm() - 1.0).abs() > QUAT_NORM_TOL {
            return Err(err(format!("quaternion norm {} is not 1", q.norm())));
        }
        if let Some((prev, _)) = samples.last() {
            if t <= *prev {
                return Err(err(format!("timestamp {t} does not increase")));
            }
        }
        samples.push((t, Pose::new(UnitQuaternion::from_quaternion(q), Vec3::new(v[0], v[1], v[2]))));
    }
    Ok(Trajectory::new(samples)?)
}

/// Opens an EuRoC MAV sequence (left camera only): `mav0/cam0/data.csv`,
/// `mav0/cam0/data/`, `mav0/cam0/sensor.yaml`, and optionally
/// `mav0/state_groundtruth_estimate0/data.csv`.
pub fn open_euroc(dir: &Path) -> Result<SequenceSource, DatasetError> {
    let cam_dir = dir.join("mav0").join("cam0");
    let data_dir = cam_dir.join("data");
    list_images(&data_dir)?;
    let sensor = cam_dir.join("sensor.yaml");
    let sensor_text = std::fs::read_to_string(&sensor).map_err(|e| DatasetError::MalformedCalib {
        path: sensor.clone(),
        line: 0,
        message: e.to_string(),
    })?;
    let camera = parse_sensor(&sensor_text, &sensor)?;

    let csv = cam_dir.join("data.csv");
    let text = read_text(&csv)?;
    let mut frames: Vec<FrameRecord> = Vec::new();
    for (line, row) in csv_rows(&text) {
        let err = |message: String| DatasetError::Malformed { path: csv.clone(), line, message };
        if row.len() != 2 {
            return Err(err(format!("expected 'timestamp,filename', found {} columns", row.len())));
        }
        let t = ns_to_s(row[0], &csv, line)?;
        if let Some(prev) = frames.last() {
            if t <= prev.timestamp {
                return Err(err(format!("timestamp {} collides with or precedes frame {}", row[0], prev.id)));
            }
        }
        let image = data_dir.join(row[1]);
        if !image.is_file() {
            return Err(err(format!("image {} does not exist", image.display())));
        }
        frames.push(FrameRecord { id: row[0].to_string(), timestamp: t, image: Some(image) });
    }
    if frames.is_empty() {
        return Err(DatasetError::MissingImages { path: csv });
    }

    let gt_path = dir.join("mav0").join("state_groundtruth_estimate0").join("data.csv");
    let ground_truth = if gt_path.exists() { Some(parse_groundtruth(&read_text(&gt_path)?, &gt_path)?) } else { None };
    let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "euroc".into());
    SequenceSource::new(name, frames, camera, ground_truth)
}
