//! Rotation, pose and similarity algebra.
//!
//! Rotations are stored as unit quaternions and renormalized after every
//! composition; matrix views are computed on demand. Camera poses use the
//! world-to-camera rotation convention: a world point `X` has camera
//! coordinates `R (X - c)` where `c` is the camera center.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Quaternion, Unit, UnitQuaternion, Vector2, Vector3};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance on quaternion norms accepted from external input.
pub const QUATERNION_NORM_TOL: f64 = 1e-6;

/// Element of SO(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(UnitQuaternion::identity())
    }

    pub fn from_unit_quaternion(q: UnitQuaternion<f64>) -> Self {
        Rotation(q)
    }

    /// Builds a rotation from raw `(w, x, y, z)` coefficients.
    ///
    /// The norm must be within [`QUATERNION_NORM_TOL`] of one; the quaternion
    /// is then renormalized. Coefficients that are already unit (to a few ulps)
    /// are kept bit-for-bit so that text round trips are exact.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let q = Quaternion::new(w, x, y, z);
        let norm = q.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > QUATERNION_NORM_TOL {
            return Err(Error::InvalidInput(format!(
                "quaternion norm {norm} is not within {QUATERNION_NORM_TOL} of 1"
            )));
        }
        if (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
            Ok(Rotation(Unit::new_unchecked(q)))
        } else {
            Ok(Rotation(Unit::new_normalize(q)))
        }
    }

    /// Projects an arbitrary matrix onto SO(3) (nearest rotation).
    pub fn from_matrix(m: &Mat3) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut d = Mat3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        let r = u * d * v_t;
        Rotation(UnitQuaternion::from_matrix(&r))
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    /// `(w, x, y, z)` coefficients.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn matrix(&self) -> Mat3 {
        self.0.to_rotation_matrix().into_inner()
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.inverse())
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0.transform_vector(v)
    }

    pub fn inverse_rotate(&self, v: &Vec3) -> Vec3 {
        self.0.inverse_transform_vector(v)
    }

    /// Exponential map (Rodrigues): rotation by `|omega|` radians about `omega`.
    pub fn exp(omega: &Vec3) -> Self {
        exp_so3(omega)
    }

    pub fn log(&self) -> Vec3 {
        log_so3(self)
    }

    /// Geodesic distance in radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        self.0.angle_to(&other.0)
    }

    pub fn angle(&self) -> f64 {
        self.0.angle()
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(Unit::new_normalize(
            *self.0.quaternion() * *rhs.0.quaternion(),
        ))
    }
}

impl Mul<Vec3> for Rotation {
    type Output = Vec3;
    fn mul(self, rhs: Vec3) -> Vec3 {
        self.rotate(&rhs)
    }
}

impl Mul<&Vec3> for &Rotation {
    type Output = Vec3;
    fn mul(self, rhs: &Vec3) -> Vec3 {
        self.rotate(rhs)
    }
}

/// SO(3) exponential. Evaluated through the half-angle quaternion, which is
/// algebraically identical to the Rodrigues formula.
pub fn exp_so3(omega: &Vec3) -> Rotation {
    let theta = omega.norm();
    let half = 0.5 * theta;
    // sin(theta/2) / theta, with a series near zero.
    let k = if theta < 1e-3 {
        let t2 = theta * theta;
        0.5 - t2 / 48.0 + t2 * t2 / 3840.0
    } else {
        half.sin() / theta
    };
    let q = Quaternion::new(half.cos(), k * omega.x, k * omega.y, k * omega.z);
    Rotation(Unit::new_normalize(q))
}

/// SO(3) logarithm.
///
/// Uses the trace for the angle and the skew part for the axis away from pi.
/// For angles beyond 2pi/3 the axis is read from the symmetric part, taking
/// the column with the largest diagonal entry, and its sign from the skew part.
/// At exactly pi the sign is arbitrary; results agree with `exp` to about 1e-7
/// in the last ~1e-7 rad before pi.
pub fn log_so3(r: &Rotation) -> Vec3 {
    let m = r.matrix();
    let skew = Vec3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    );
    let c = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let s = 0.5 * skew.norm();
    let theta = s.atan2(c);

    if c > -0.5 {
        // theta / (2 sin theta), with a series near zero.
        let k = if theta < 1e-4 {
            0.5 + theta * theta / 12.0
        } else {
            0.5 * theta / theta.sin()
        };
        return skew * k;
    }

    // a a^T = (R + R^T - 2 cos(theta) I) / (2 (1 - cos(theta)))
    let sym = (m + m.transpose() - Mat3::identity() * (2.0 * c)) / (2.0 * (1.0 - c));
    let mut best = 0;
    for i in 1..3 {
        if sym[(i, i)] > sym[(best, best)] {
            best = i;
        }
    }
    let mut axis: Vec3 = sym.column(best).into();
    axis /= axis.norm();
    if axis.dot(&skew) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Unit 3-vector: a viewing ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitBearing(Vec3);

impl UnitBearing {
    /// Normalizes `v`. Returns `None` for zero or non-finite input.
    pub fn new(v: Vec3) -> Option<Self> {
        let n = v.norm();
        if n > 0.0 && n.is_finite() {
            Some(UnitBearing(v / n))
        } else {
            None
        }
    }

    /// Wraps a vector already known to be unit.
    pub fn new_unchecked(v: Vec3) -> Self {
        UnitBearing(v)
    }

    pub fn as_vec(&self) -> &Vec3 {
        &self.0
    }

    pub fn into_inner(self) -> Vec3 {
        self.0
    }

    pub fn dot(&self, other: &UnitBearing) -> f64 {
        self.0.dot(&other.0)
    }

    /// Angle between two bearings in radians, accurate for small angles.
    pub fn angle_to(&self, other: &UnitBearing) -> f64 {
        self.0.cross(&other.0).norm().atan2(self.0.dot(&other.0))
    }

    pub fn rotated(&self, r: &Rotation) -> UnitBearing {
        UnitBearing(r.rotate(&self.0))
    }
}

impl std::ops::Neg for UnitBearing {
    type Output = UnitBearing;
    fn neg(self) -> UnitBearing {
        UnitBearing(-self.0)
    }
}

/// Rotation taking `u` onto `v` about the axis `u x v`.
///
/// For antipodal inputs the result is the half turn about the axis obtained
/// by Gram-Schmidt of `(1,0,0)` against `u`, or of `(0,1,0)` when `u` is
/// nearly parallel to the x axis.
pub fn rotation_aligning(u: &UnitBearing, v: &UnitBearing) -> Rotation {
    let (u, v) = (u.as_vec(), v.as_vec());
    let cross = u.cross(v);
    let sin = cross.norm();
    let cos = u.dot(v);
    if sin < 1e-15 {
        if cos > 0.0 {
            return Rotation::identity();
        }
        return exp_so3(&(antipodal_axis(u) * PI));
    }
    let angle = sin.atan2(cos);
    exp_so3(&(cross * (angle / sin)))
}

fn antipodal_axis(u: &Vec3) -> Vec3 {
    let mut seed = Vec3::x();
    if u.dot(&seed).abs() > 0.9 {
        seed = Vec3::y();
    }
    let a = seed - u * u.dot(&seed);
    a / a.norm()
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square-pixel camera with the principal point at the image center.
    pub fn from_hfov(hfov_deg: f64, width: u32, height: u32) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn pixel_to_bearing(&self, px: &Vec2) -> UnitBearing {
        let v = Vec3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0);
        UnitBearing::new_unchecked(v / v.norm())
    }

    /// Projects a direction (any positive multiple works) to pixels.
    pub fn project(&self, d: &Vec3) -> Result<Vec2> {
        if d.z <= 0.0 {
            return Err(Error::BehindCamera(d.z));
        }
        Ok(Vec2::new(
            self.fx * d.x / d.z + self.cx,
            self.fy * d.y / d.z + self.cy,
        ))
    }

    pub fn bearing_to_pixel(&self, b: &UnitBearing) -> Result<Vec2> {
        self.project(b.as_vec())
    }

    pub fn contains(&self, px: &Vec2) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }
}

/// Rigid camera pose: world-to-camera rotation and camera center.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct CameraPose {
    pub rotation: Rotation,
    pub position: Vec3,
}

impl CameraPose {
    pub fn new(rotation: Rotation, position: Vec3) -> Self {
        CameraPose { rotation, position }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn to_camera(&self, x: &Vec3) -> Vec3 {
        self.rotation.rotate(&(x - self.position))
    }

    /// World direction of a camera-frame bearing.
    pub fn ray_direction(&self, b: &UnitBearing) -> Vec3 {
        self.rotation.inverse_rotate(b.as_vec())
    }

    pub fn project(&self, k: &Intrinsics, x: &Vec3) -> Result<Vec2> {
        k.project(&self.to_camera(x))
    }
}

/// Similarity `x -> scale * R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SimilarityTransform {
    pub fn new(scale: f64, rotation: Rotation, translation: Vec3) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "similarity scale {scale} must be positive"
            )));
        }
        Ok(SimilarityTransform {
            scale,
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        SimilarityTransform {
            scale: 1.0,
            rotation: Rotation::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation.rotate(x) * self.scale + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.apply(&other.translation),
        }
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let inv_s = 1.0 / self.scale;
        let r_inv = self.rotation.inverse();
        SimilarityTransform {
            scale: inv_s,
            rotation: r_inv,
            translation: -r_inv.rotate(&self.translation) * inv_s,
        }
    }
}

pub fn sim3_compose(a: &SimilarityTransform, b: &SimilarityTransform) -> SimilarityTransform {
    a.compose(b)
}

pub fn sim3_invert(a: &SimilarityTransform) -> SimilarityTransform {
    a.inverse()
}

pub fn sim3_apply(a: &SimilarityTransform, x: &Vec3) -> Vec3 {
    a.apply(x)
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}
