//! Rigid-body primitives: vectors, unit quaternions, poses and twists.
//!
//! Units are fixed throughout the crate: meters, seconds, radians.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        [v.x, v.y, v.z]
    }
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };
    pub const X: Vec3 = Vec3 { x: 1.0, y: 0.0, z: 0.0 };
    pub const Y: Vec3 = Vec3 { x: 0.0, y: 1.0, z: 0.0 };
    pub const Z: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 1.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
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

    /// Unit vector in the same direction, or `None` for (near-)zero vectors.
    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        (n > 1e-12 && n.is_finite()).then(|| self / n)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Scales the vector down so its norm does not exceed `max_norm`.
    pub fn clamp_norm(self, max_norm: f64) -> Vec3 {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self * (max_norm / n)
        } else {
            self
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
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

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

/// Unit quaternion `w + xi + yj + zk`. Every constructor and composition
/// renormalizes, so the norm stays within 1e-9 of one. Serialized as
/// `[w, x, y, z]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Rotation {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl TryFrom<[f64; 4]> for Rotation {
    type Error = GeometryError;
    fn try_from(q: [f64; 4]) -> Result<Self, GeometryError> {
        Rotation::from_quaternion(q[0], q[1], q[2], q[3])
    }
}

impl From<Rotation> for [f64; 4] {
    fn from(r: Rotation) -> Self {
        r.quaternion()
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Rotation::IDENTITY
    }
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Builds a rotation from raw quaternion components, normalizing them.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n < 1e-12 {
            return Err(GeometryError::InvalidArgument("degenerate quaternion"));
        }
        Ok(Rotation { w: w / n, x: x / n, y: y / n, z: z / n })
    }

    pub fn quaternion(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Exponential map of a rotation vector (axis times angle).
    pub fn from_rotation_vector(v: Vec3) -> Rotation {
        let angle = v.norm();
        if angle < 1e-12 {
            // second-order expansion keeps tiny steps accurate
            let q = Rotation { w: 1.0, x: 0.5 * v.x, y: 0.5 * v.y, z: 0.5 * v.z };
            return q.renormalized();
        }
        let half = 0.5 * angle;
        let s = half.sin() / angle;
        Rotation { w: half.cos(), x: v.x * s, y: v.y * s, z: v.z * s }.renormalized()
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Result<Rotation, GeometryError> {
        let axis = axis
            .normalized()
            .ok_or(GeometryError::InvalidArgument("zero rotation axis"))?;
        Ok(Rotation::from_rotation_vector(axis * angle))
    }

    /// Logarithm map: rotation vector with angle in [0, π].
    pub fn to_rotation_vector(&self) -> Vec3 {
        let (w, v) = if self.w < 0.0 {
            (-self.w, Vec3::new(-self.x, -self.y, -self.z))
        } else {
            (self.w, Vec3::new(self.x, self.y, self.z))
        };
        let s = v.norm();
        if s < 1e-12 {
            return v * 2.0;
        }
        let angle = 2.0 * s.atan2(w);
        v * (angle / s)
    }

    /// Rotation angle in [0, π].
    pub fn angle(&self) -> f64 {
        self.to_rotation_vector().norm()
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    fn renormalized(self) -> Rotation {
        let n = self.norm();
        Rotation { w: self.w / n, x: self.x / n, y: self.y / n, z: self.z / n }
    }

    pub fn inverse(&self) -> Rotation {
        Rotation { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Hamilton product `self ∘ other` (apply `other` first).
    pub fn compose(&self, o: &Rotation) -> Rotation {
        Rotation {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
        .renormalized()
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let u = Vec3::new(self.x, self.y, self.z);
        let t = u.cross(v) * 2.0;
        v + t * self.w + u.cross(t)
    }

    pub fn inverse_rotate(&self, v: Vec3) -> Vec3 {
        self.inverse().rotate(v)
    }

    /// Shortest rotation taking unit vector `from` onto unit vector `to`.
    pub fn between(from: Vec3, to: Vec3) -> Rotation {
        let (Some(a), Some(b)) = (from.normalized(), to.normalized()) else {
            return Rotation::IDENTITY;
        };
        let c = a.dot(b).clamp(-1.0, 1.0);
        let axis = a.cross(b);
        match axis.normalized() {
            Some(axis) => Rotation::from_rotation_vector(axis * c.acos()),
            None if c > 0.0 => Rotation::IDENTITY,
            None => {
                let perp = if a.x.abs() < 0.9 { Vec3::X } else { Vec3::Y };
                let axis = a.cross(perp).normalized().unwrap_or(Vec3::Z);
                Rotation::from_rotation_vector(axis * std::f64::consts::PI)
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// End-effector pose: position in the world frame and the orientation of the
/// end-effector frame relative to the world.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: Rotation,
}

impl Pose {
    pub const IDENTITY: Pose = Pose { position: Vec3::ZERO, orientation: Rotation::IDENTITY };

    pub fn new(position: Vec3, orientation: Rotation) -> Self {
        Pose { position, orientation }
    }

    pub fn is_finite(&self) -> bool {
        self.position.is_finite() && self.orientation.is_finite()
    }

    /// Point given in the end-effector frame, expressed in the world frame.
    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        self.position + self.orientation.rotate(p)
    }

    /// World point expressed in the end-effector frame.
    pub fn inverse_transform_point(&self, p: Vec3) -> Vec3 {
        self.orientation.inverse_rotate(p - self.position)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Frame {
    EndEffector,
    World,
}

/// Spatial velocity `(vx, vy, vz, ωx, ωy, ωz)` tagged with the frame it is
/// expressed in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    pub linear: Vec3,
    pub angular: Vec3,
    pub frame: Frame,
}

impl Twist {
    pub fn zero(frame: Frame) -> Self {
        Twist { linear: Vec3::ZERO, angular: Vec3::ZERO, frame }
    }

    pub fn new(linear: Vec3, angular: Vec3, frame: Frame) -> Self {
        Twist { linear, angular, frame }
    }

    pub fn ee(linear: Vec3, angular: Vec3) -> Self {
        Twist::new(linear, angular, Frame::EndEffector)
    }

    pub fn world(linear: Vec3, angular: Vec3) -> Self {
        Twist::new(linear, angular, Frame::World)
    }

    pub fn from_array(v: [f64; 6], frame: Frame) -> Self {
        Twist::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]), frame)
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.linear.x,
            self.linear.y,
            self.linear.z,
            self.angular.x,
            self.angular.y,
            self.angular.z,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.linear.is_finite() && self.angular.is_finite()
    }

    pub fn is_zero(&self) -> bool {
        self.linear == Vec3::ZERO && self.angular == Vec3::ZERO
    }

    /// Clamps linear and angular magnitudes independently.
    pub fn clamped(&self, max_linear: f64, max_angular: f64) -> Twist {
        Twist {
            linear: self.linear.clamp_norm(max_linear),
            angular: self.angular.clamp_norm(max_angular),
            frame: self.frame,
        }
    }

    /// Component-wise sum. Both twists must be expressed in the same frame.
    pub fn try_add(&self, o: &Twist) -> Result<Twist, GeometryError> {
        if self.frame != o.frame {
            return Err(GeometryError::FrameMismatch { left: self.frame, right: o.frame });
        }
        Ok(Twist {
            linear: self.linear + o.linear,
            angular: self.angular + o.angular,
            frame: self.frame,
        })
    }
}

/// Advances `pose` by a constant end-effector-frame twist held for `dt`.
///
/// The orientation is composed with the exponential of `angular·dt` first;
/// the position then moves by `linear·dt` rotated into the world by the new
/// orientation.
pub fn integrate_pose(pose: &Pose, twist: &Twist, dt: f64) -> Result<Pose, GeometryError> {
    if twist.frame != Frame::EndEffector {
        return Err(GeometryError::FrameMismatch { left: twist.frame, right: Frame::EndEffector });
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(GeometryError::InvalidArgument("dt must be positive and finite"));
    }
    if !pose.is_finite() || !twist.is_finite() {
        return Err(GeometryError::InvalidArgument("non-finite pose or twist"));
    }
    let step = Rotation::from_rotation_vector(twist.angular * dt);
    let orientation = pose.orientation.compose(&step);
    let position = pose.position + orientation.rotate(twist.linear * dt);
    Ok(Pose { position, orientation })
}

pub fn twist_world_to_ee(twist: &Twist, pose: &Pose) -> Result<Twist, GeometryError> {
    if twist.frame != Frame::World {
        return Err(GeometryError::FrameMismatch { left: twist.frame, right: Frame::World });
    }
    if !twist.is_finite() || !pose.is_finite() {
        return Err(GeometryError::InvalidArgument("non-finite pose or twist"));
    }
    Ok(Twist::ee(
        pose.orientation.inverse_rotate(twist.linear),
        pose.orientation.inverse_rotate(twist.angular),
    ))
}

pub fn twist_ee_to_world(twist: &Twist, pose: &Pose) -> Result<Twist, GeometryError> {
    if twist.frame != Frame::EndEffector {
        return Err(GeometryError::FrameMismatch { left: twist.frame, right: Frame::EndEffector });
    }
    if !twist.is_finite() || !pose.is_finite() {
        return Err(GeometryError::InvalidArgument("non-finite pose or twist"));
    }
    Ok(Twist::world(pose.orientation.rotate(twist.linear), pose.orientation.rotate(twist.angular)))
}
