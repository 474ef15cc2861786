use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion};

use super::EvalError;
use crate::geometry::{Point3, Pose, Vec3};

/// Time-ordered camera poses. Each pose maps camera coordinates into the
/// world, the convention of TUM and KITTI pose files.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    samples: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(samples: Vec<(f64, Pose)>) -> Result<Self, EvalError> {
        if let Some(i) = samples.windows(2).position(|w| !(w[1].0 > w[0].0)) {
            return Err(EvalError::NonMonotonic(i + 1));
        }
        Ok(Self { samples })
    }

    /// Builds from world-to-camera poses.
    pub fn from_world_to_camera(samples: impl IntoIterator<Item = (f64, Pose)>) -> Result<Self, EvalError> {
        Self::new(samples.into_iter().map(|(t, p)| (t, p.inverse())).collect())
    }

    pub fn push(&mut self, timestamp: f64, camera_to_world: Pose) -> Result<(), EvalError> {
        if self.samples.last().is_some_and(|(t, _)| timestamp <= *t) {
            return Err(EvalError::NonMonotonic(self.samples.len()));
        }
        self.samples.push((timestamp, camera_to_world));
        Ok(())
    }

    pub fn samples(&self) -> &[(f64, Pose)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.0).collect()
    }

    pub fn positions(&self) -> Vec<Point3> {
        self.samples.iter().map(|s| s.1.translation()).collect()
    }

    /// Accumulated path length at each sample.
    pub fn path_lengths(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.len());
        for (i, s) in self.samples.iter().enumerate() {
            if i > 0 {
                acc += (s.1.translation() - self.samples[i - 1].1.translation()).norm();
            }
            out.push(acc);
        }
        out
    }

    /// `timestamp tx ty tz qx qy qz qw` per line.
    pub fn to_tum(&self) -> String {
        let mut out = String::new();
        for (t, p) in &self.samples {
            let q = p.rotation().quaternion();
            let c = p.translation();
            let _ = writeln!(out, "{} {} {} {} {} {} {} {}", t, c.x, c.y, c.z, q.i, q.j, q.k, q.w);
        }
        out
    }

    pub fn parse_tum(text: &str, path: &Path) -> Result<Self, EvalError> {
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let v = parse_floats(line, 8, path, i + 1)?;
            let q = Quaternion::new(v[7], v[4], v[5], v[6]);
            let n = q.norm();
            if (n - 1.0).abs() > 1e-3 {
                return Err(EvalError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("quaternion norm {n} differs from 1"),
                });
            }
            samples.push((v[0], Pose::new(UnitQuaternion::from_quaternion(q), Vec3::new(v[1], v[2], v[3]))));
        }
        Self::new(samples).map_err(|e| match e {
            EvalError::NonMonotonic(k) => EvalError::Parse {
                path: path.to_path_buf(),
                line: k + 1,
                message: "timestamps must be strictly increasing".into(),
            },
            other => other,
        })
    }

    /// Twelve row-major entries of the 3×4 `[R|t]` matrix per line.
    pub fn to_kitti(&self) -> String {
        let mut out = String::new();
        for (_, p) in &self.samples {
            let r = p.to_rows();
            let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    /// KITTI poses carry no time; `timestamps` supplies it, or the line index is used.
    pub fn parse_kitti(text: &str, timestamps: Option<&[f64]>, path: &Path) -> Result<Self, EvalError> {
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let v = parse_floats(line, 12, path, i + 1)?;
            let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
            let pose = Pose::from_matrix(&r, Vec3::new(v[3], v[7], v[11])).map_err(|e| EvalError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            let k = samples.len();
            let t = match timestamps {
                Some(ts) => *ts.get(k).ok_or_else(|| EvalError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("more poses than the {} timestamps", ts.len()),
                })?,
                None => k as f64,
            };
            samples.push((t, pose));
        }
        Self::new(samples)
    }

    pub fn load_tum(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })?;
        Self::parse_tum(&text, path)
    }
}

fn parse_floats(line: &str, n: usize, path: &Path, ln: usize) -> Result<Vec<f64>, EvalError> {
    let err = |message: String| EvalError::Parse { path: path.to_path_buf(), line: ln, message };
    let v: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad number '{t}'"))))
        .collect::<Result<_, _>>()?;
    if v.len() != n {
        return Err(err(format!("expected {n} values, found {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(err("non-finite value".into()));
    }
    Ok(v)
}
