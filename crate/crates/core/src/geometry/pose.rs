//! Rigid-body (SE3) and similarity (Sim3) transforms.
//!
//! Both map world coordinates into the camera frame. Rotations are kept as
//! unit quaternions and renormalized after every composition; matrices are
//! produced on demand.

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, UnitQuaternion, Vector3, Vector6};

use super::GeometryError;

pub type Vec3 = Vector3<f64>;
pub type Point3 = Vector3<f64>;

/// Tangent vector of Sim3: `[rho (3), phi (3), sigma]`.
pub type Vector7 = nalgebra::SVector<f64, 7>;

const SMALL_ANGLE: f64 = 1e-6;

pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn so3_exp(phi: &Vec3) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*phi)
}

pub fn so3_log(q: &UnitQuaternion<f64>) -> Vec3 {
    q.scaled_axis()
}

fn renormalized(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let q = q.into_inner();
    UnitQuaternion::new_normalize(Quaternion::new(q.w, q.i, q.j, q.k))
}

/// Left Jacobian of SO3, `V` in the SE3 exponential.
fn so3_left_jacobian(phi: &Vec3) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < SMALL_ANGLE {
        Matrix3::identity() + 0.5 * k + (1.0 / 6.0) * k * k
    } else {
        let t2 = theta * theta;
        Matrix3::identity()
            + ((1.0 - theta.cos()) / t2) * k
            + ((theta - theta.sin()) / (t2 * theta)) * k * k
    }
}

/// Rigid transform mapping world points into the camera frame: `x_c = R x_w + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation: renormalized(rotation),
            translation,
        }
    }

    /// Builds a pose from a rotation matrix, rejecting matrices that are not
    /// proper rotations within `1e-6`.
    pub fn from_matrix(rotation: &Matrix3<f64>, translation: Vec3) -> Result<Self, GeometryError> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !err.is_finite() || err > 1e-6 || rotation.determinant() <= 0.0 {
            return Err(GeometryError::NotARotation { error: err });
        }
        let rot = Rotation3::from_matrix_unchecked(*rotation);
        Ok(Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation))
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.to_rotation_matrix().matrix()
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    pub fn transform(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rinv = self.rotation.inverse();
        Self {
            rotation: rinv,
            translation: -(rinv * self.translation),
        }
    }

    /// `self ∘ rhs`: apply `rhs` first.
    pub fn compose(&self, rhs: &Pose) -> Self {
        Self::new(
            self.rotation * rhs.rotation,
            self.rotation * rhs.translation + self.translation,
        )
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Point3 {
        -(self.rotation.inverse() * self.translation)
    }

    /// SE3 exponential of `xi = [rho, phi]`.
    pub fn exp(xi: &Vector6<f64>) -> Self {
        let rho = Vec3::new(xi[0], xi[1], xi[2]);
        let phi = Vec3::new(xi[3], xi[4], xi[5]);
        Self::new(so3_exp(&phi), so3_left_jacobian(&phi) * rho)
    }

    pub fn log(&self) -> Vector6<f64> {
        let phi = so3_log(&self.rotation);
        let v = so3_left_jacobian(&phi);
        let rho = v.try_inverse().unwrap_or_else(Matrix3::identity) * self.translation;
        Vector6::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z)
    }

    /// Left-multiplicative update `exp(xi) ∘ self`.
    pub fn retract(&self, xi: &Vector6<f64>) -> Self {
        Self::exp(xi).compose(self)
    }

    /// Rotation angle of the pose, radians.
    pub fn angle(&self) -> f64 {
        self.rotation.angle()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major 3x4 `[R | t]`.
    pub fn to_rows(&self) -> [f64; 12] {
        let r = self.rotation_matrix();
        let t = self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }

    pub fn from_rows(rows: &[f64; 12]) -> Result<Self, GeometryError> {
        let r = Matrix3::new(
            rows[0], rows[1], rows[2], rows[4], rows[5], rows[6], rows[8], rows[9], rows[10],
        );
        Self::from_matrix(&r, Vec3::new(rows[3], rows[7], rows[11]))
    }

    pub fn to_sim3(&self) -> Sim3 {
        Sim3 {
            rotation: self.rotation,
            translation: self.translation,
            scale: 1.0,
        }
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl std::ops::Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

/// Similarity transform `x' = s R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sim3 {
    rotation: UnitQuaternion<f64>,
    translation: Vec3,
    scale: f64,
}

impl Default for Sim3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Sim3 {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
            scale: 1.0,
        }
    }

    pub fn new(
        rotation: UnitQuaternion<f64>,
        translation: Vec3,
        scale: f64,
    ) -> Result<Self, GeometryError> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(GeometryError::InvalidScale(scale));
        }
        Ok(Self {
            rotation: renormalized(rotation),
            translation,
            scale,
        })
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.to_rotation_matrix().matrix()
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn transform(&self, p: &Point3) -> Point3 {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn compose(&self, rhs: &Sim3) -> Self {
        Self {
            rotation: renormalized(self.rotation * rhs.rotation),
            translation: self.scale * (self.rotation * rhs.translation) + self.translation,
            scale: self.scale * rhs.scale,
        }
    }

    pub fn inverse(&self) -> Self {
        let rinv = self.rotation.inverse();
        let sinv = 1.0 / self.scale;
        Self {
            rotation: rinv,
            translation: -sinv * (rinv * self.translation),
            scale: sinv,
        }
    }

    /// Drops the scale: a world→camera similarity `sR, t` becomes the rigid
    /// camera pose `R, t/s` that yields the same image projections.
    pub fn to_pose(&self) -> Pose {
        Pose::new(self.rotation, self.translation / self.scale)
    }

    /// Sim3 exponential of `[rho, phi, sigma]`.
    pub fn exp(xi: &Vector7) -> Self {
        let rho = Vec3::new(xi[0], xi[1], xi[2]);
        let phi = Vec3::new(xi[3], xi[4], xi[5]);
        let sigma = xi[6];
        let w = sim3_w(&phi, sigma);
        Self {
            rotation: so3_exp(&phi),
            translation: w * rho,
            scale: sigma.exp(),
        }
    }

    pub fn log(&self) -> Vector7 {
        let phi = so3_log(&self.rotation);
        let sigma = self.scale.ln();
        let w = sim3_w(&phi, sigma);
        let rho = w.try_inverse().unwrap_or_else(Matrix3::identity) * self.translation;
        let mut out = Vector7::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&rho);
        out.fixed_rows_mut::<3>(3).copy_from(&phi);
        out[6] = sigma;
        out
    }

    pub fn retract(&self, xi: &Vector7) -> Self {
        Self::exp(xi).compose(self)
    }
}

impl std::ops::Mul for Sim3 {
    type Output = Sim3;
    fn mul(self, rhs: Sim3) -> Sim3 {
        self.compose(&rhs)
    }
}

/// Translation Jacobian `W` of the Sim3 exponential.
fn sim3_w(phi: &Vec3, sigma: f64) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    let k2 = k * k;
    let s = sigma.exp();
    let (a, b, c);
    if sigma.abs() < SMALL_ANGLE {
        c = 1.0 + sigma / 2.0 + sigma * sigma / 6.0;
        if theta < SMALL_ANGLE {
            a = 0.5 + sigma / 3.0;
            b = 1.0 / 6.0 + sigma / 8.0;
        } else {
            let t2 = theta * theta;
            a = (1.0 - theta.cos()) / t2;
            b = (theta - theta.sin()) / (t2 * theta);
        }
    } else {
        c = (s - 1.0) / sigma;
        if theta < SMALL_ANGLE {
            let s2 = sigma * sigma;
            a = ((sigma - 1.0) * s + 1.0) / s2;
            b = (s * 0.5 * s2 + s - 1.0 - sigma * s) / (s2 * sigma);
        } else {
            let t2 = theta * theta;
            let sa = s * theta.sin();
            let sb = s * theta.cos();
            let cc = t2 + sigma * sigma;
            a = (sa * sigma + (1.0 - sb) * theta) / (theta * cc);
            b = (c - ((sb - 1.0) * sigma + sa * theta) / cc) / t2;
        }
    }
    a * k + b * k2 + c * Matrix3::identity()
}
