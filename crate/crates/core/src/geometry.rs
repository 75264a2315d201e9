//! Value types shared by every subsystem.
//!
//! World frame: right-handed, z-up, meters. Yaw is the rotation about +z in
//! radians, zero along +x. The "forward" axis of a tracked controller is its
//! local +x rotated by its orientation.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("degenerate orientation: forward axis is vertical")]
    DegenerateOrientation,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    /// Unit vector in the same direction, or `None` for (near-)zero vectors.
    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        if n > 1e-12 && n.is_finite() {
            Some(self / n)
        } else {
            None
        }
    }

    pub fn horizontal(self) -> Vec3 {
        Vec3::new(self.x, self.y, 0.0)
    }

    /// Component-wise product.
    pub fn hadamard(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    pub fn lerp(self, o: Vec3, s: f64) -> Vec3 {
        self + (o - self) * s
    }

    /// Clamps the vector length to `max_len`, keeping its direction.
    pub fn clamp_norm(self, max_len: f64) -> Vec3 {
        let n = self.norm();
        if n > max_len && n > 0.0 {
            self * (max_len / n)
        } else {
            self
        }
    }

    pub fn component_min(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn component_max(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl SubAssign for Vec3 {
    fn sub_assign(&mut self, o: Vec3) {
        *self = *self - o;
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Orientation quaternion, scalar first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quat {
    fn default() -> Self {
        Quat::IDENTITY
    }
}

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Result<Quat, GeometryError> {
        let axis = axis
            .normalized()
            .ok_or(GeometryError::InvalidArgument("rotation axis must be non-zero"))?;
        let (s, c) = (angle * 0.5).sin_cos();
        Ok(Quat::new(c, axis.x * s, axis.y * s, axis.z * s))
    }

    /// Pure heading rotation about +z.
    pub fn from_yaw(yaw: f64) -> Quat {
        let (s, c) = (yaw * 0.5).sin_cos();
        Quat::new(c, 0.0, 0.0, s)
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Result<Quat, GeometryError> {
        if !self.is_finite() {
            return Err(GeometryError::InvalidArgument("quaternion must be finite"));
        }
        let n = self.norm();
        if n < 1e-12 {
            return Err(GeometryError::InvalidArgument("quaternion has zero norm"));
        }
        Ok(Quat::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    pub fn conjugate(self) -> Quat {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self * o` (apply `o` first, then `self`).
    pub fn mul(self, o: Quat) -> Quat {
        Quat::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    fn vector(self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }
}

/// Rotates `v` by the unit quaternion `q`.
pub fn rotate(q: Quat, v: Vec3) -> Result<Vec3, GeometryError> {
    if !q.is_finite() || !v.is_finite() {
        return Err(GeometryError::InvalidArgument("non-finite input to rotate"));
    }
    if (q.norm() - 1.0).abs() > 1e-6 {
        return Err(GeometryError::InvalidArgument("quaternion is not unit norm"));
    }
    Ok(rotate_unchecked(q, v))
}

// v' = v + 2w(u x v) + 2 u x (u x v)
pub(crate) fn rotate_unchecked(q: Quat, v: Vec3) -> Vec3 {
    let u = q.vector();
    let t = u.cross(v) * 2.0;
    v + t * q.w + u.cross(t)
}

/// Heading of the local +x axis projected into the world xy-plane, in (-π, π].
pub fn yaw_of(q: Quat) -> Result<f64, GeometryError> {
    let fwd = rotate(q, Vec3::X)?;
    let h = fwd.x.hypot(fwd.y);
    if h < 1e-9 {
        return Err(GeometryError::DegenerateOrientation);
    }
    Ok(wrap_angle(fwd.y.atan2(fwd.x)))
}

/// Maps an angle to (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Rotates a vector about +z by `yaw` radians.
pub fn rotate_z(v: Vec3, yaw: f64) -> Vec3 {
    let (s, c) = yaw.sin_cos();
    Vec3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z)
}

/// Timestamped rigid-body pose in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: Quat,
    /// Seconds, microsecond resolution.
    pub timestamp: f64,
}

impl Pose {
    pub fn new(position: Vec3, orientation: Quat, timestamp: f64) -> Self {
        Self { position, orientation, timestamp }
    }

    /// World-frame direction of the local +x axis.
    pub fn forward(&self) -> Vec3 {
        rotate_unchecked(self.orientation, Vec3::X)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    // Rotation matrix built directly from the quaternion components.
    fn matrix_rotate(q: Quat, v: Vec3) -> Vec3 {
        let (w, x, y, z) = (q.w, q.x, q.y, q.z);
        let m = [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ];
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    fn assert_vec(a: Vec3, b: Vec3, eps: f64) {
        assert_abs_diff_eq!(a.x, b.x, epsilon = eps);
        assert_abs_diff_eq!(a.y, b.y, epsilon = eps);
        assert_abs_diff_eq!(a.z, b.z, epsilon = eps);
    }

    #[test]
    fn identity_rotation() {
        let v = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(rotate(Quat::IDENTITY, v).unwrap(), v);
    }

    #[test]
    fn quarter_turn_about_z() {
        let q = Quat::from_axis_angle(Vec3::Z, PI / 2.0).unwrap();
        assert_vec(rotate(q, Vec3::X).unwrap(), Vec3::new(0.0, 1.0, 0.0), 1e-12);
    }

    #[test]
    fn quarter_turn_about_y_matches_matrix() {
        let q = Quat::from_axis_angle(Vec3::Y, PI / 2.0).unwrap();
        let expected = matrix_rotate(q, Vec3::X);
        assert_vec(expected, Vec3::new(0.0, 0.0, -1.0), 1e-12);
        assert_vec(rotate(q, Vec3::X).unwrap(), expected, 1e-12);
    }

    #[test]
    fn rotate_rejects_non_finite() {
        let v = Vec3::new(f64::NAN, 0.0, 0.0);
        assert!(matches!(rotate(Quat::IDENTITY, v), Err(GeometryError::InvalidArgument(_))));
        let q = Quat::new(f64::INFINITY, 0.0, 0.0, 0.0);
        assert!(rotate(q, Vec3::X).is_err());
    }

    #[test]
    fn yaw_examples() {
        assert_eq!(yaw_of(Quat::IDENTITY).unwrap(), 0.0);
        let q = Quat::from_axis_angle(Vec3::Z, PI / 2.0).unwrap();
        assert_abs_diff_eq!(yaw_of(q).unwrap(), PI / 2.0, epsilon = 1e-12);
        let composed = Quat::from_yaw(40f64.to_radians()).mul(Quat::from_yaw(30f64.to_radians()));
        assert_abs_diff_eq!(yaw_of(composed).unwrap(), 70f64.to_radians(), epsilon = 1e-12);
    }

    #[test]
    fn yaw_of_vertical_forward_is_degenerate() {
        let q = Quat::from_axis_angle(Vec3::Y, -PI / 2.0).unwrap();
        assert_eq!(yaw_of(q), Err(GeometryError::DegenerateOrientation));
    }

    #[test]
    fn wrap_range() {
        assert_abs_diff_eq!(wrap_angle(PI + 0.1), -PI + 0.1, epsilon = 1e-12);
        assert_eq!(wrap_angle(PI), PI);
        assert_abs_diff_eq!(wrap_angle(-PI), PI, epsilon = 1e-12);
    }

    fn unit_quat() -> impl Strategy<Value = Quat> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-zero", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
            .prop_map(|(w, x, y, z)| Quat::new(w, x, y, z).normalized().unwrap())
    }

    fn vec3() -> impl Strategy<Value = Vec3> {
        (-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn rotate_inverse_roundtrip(q in unit_quat(), v in vec3()) {
            let back = rotate(q, rotate(q.conjugate(), v).unwrap()).unwrap();
            prop_assert!((back - v).norm() <= 1e-9 * (1.0 + v.norm()));
        }

        #[test]
        fn rotate_preserves_length(q in unit_quat(), v in vec3()) {
            let r = rotate(q, v).unwrap();
            prop_assert!((r.norm() - v.norm()).abs() <= 1e-9 * (1.0 + v.norm()));
            prop_assert!((r - matrix_rotate(q, v)).norm() <= 1e-9 * (1.0 + v.norm()));
        }

        #[test]
        fn yaw_roundtrip(theta in -PI..=PI) {
            prop_assume!(theta > -PI);
            let y = yaw_of(Quat::from_yaw(theta)).unwrap();
            prop_assert!((y - theta).abs() <= 1e-9);
        }
    }
}
