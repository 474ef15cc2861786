use std::path::Path;

use nalgebra::{Matrix3, Vector2};

use super::pose::{Point3, Pose, Vec3};
use super::GeometryError;

pub type Pixel = Vector2<f64>;

/// Points closer than this to the image plane are treated as behind the camera.
pub const DEPTH_EPSILON: f64 = 1e-6;

/// Pinhole intrinsics of a pre-rectified camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let cam = Self { fx, fy, cx, cy, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx >= 0.0
            && self.cy >= 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    /// Parses the plain-text calibration: six values `fx fy cx cy width height`,
    /// one per line, each optionally preceded by its name. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, GeometryError> {
        const NAMES: [&str; 6] = ["fx", "fy", "cx", "cy", "width", "height"];
        let mut values = Vec::with_capacity(6);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let tokens: Vec<&str> = line.split_whitespace().collect();
            let value = match tokens.as_slice() {
                [v] => *v,
                [name, v] | [name, "=", v] => {
                    let expected = NAMES.get(values.len()).copied().unwrap_or("<none>");
                    if *name != expected {
                        return Err(GeometryError::Calibration {
                            line: lineno + 1,
                            message: format!("expected `{expected}`, found `{name}`"),
                        });
                    }
                    *v
                }
                _ => {
                    return Err(GeometryError::Calibration {
                        line: lineno + 1,
                        message: format!("cannot parse `{line}`"),
                    })
                }
            };
            let v: f64 = value.parse().map_err(|_| GeometryError::Calibration {
                line: lineno + 1,
                message: format!("not a number: `{value}`"),
            })?;
            values.push(v);
        }
        if values.len() != 6 {
            return Err(GeometryError::Calibration {
                line: 0,
                message: format!("expected 6 values, found {}", values.len()),
            });
        }
        let dim = |v: f64, what: &str| -> Result<u32, GeometryError> {
            if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as u32)
            } else {
                Err(GeometryError::Calibration {
                    line: 0,
                    message: format!("{what} must be a positive integer, got {v}"),
                })
            }
        };
        Self::new(values[0], values[1], values[2], values[3], dim(values[4], "width")?, dim(values[5], "height")?)
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GeometryError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_config_string(&self) -> String {
        format!(
            "# pinhole intrinsics\nfx {}\nfy {}\ncx {}\ncy {}\nwidth {}\nheight {}\n",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height
        )
    }

    pub fn k_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Projects a camera-frame point; `None` when it is not in front of the camera.
    pub fn project_camera(&self, p: &Point3) -> Option<Pixel> {
        if p.z <= DEPTH_EPSILON {
            return None;
        }
        Some(Pixel::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Normalized image-plane coordinates (z = 1) of a pixel.
    pub fn unproject(&self, px: &Pixel) -> Vec3 {
        Vec3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0)
    }

    pub fn contains(&self, px: &Pixel) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    pub fn diagonal(&self) -> f64 {
        ((self.width as f64).powi(2) + (self.height as f64).powi(2)).sqrt()
    }
}

/// Projects a world point seen from `pose`; `None` when the point is behind the camera.
pub fn project(point: &Point3, pose: &Pose, cam: &CameraIntrinsics) -> Option<Pixel> {
    cam.project_camera(&pose.transform(point))
}
