//! Virtual workspace volume and the corrective safety twist.
//!
//! The safe region is a tree of spheres, capped cylinders and half-spaces
//! combined with union and intersection. Distances are signed: negative
//! inside, positive outside. Booleans use `min`/`max` of child distances,
//! which is exact in sign and a bound in magnitude.

use serde::{Deserialize, Serialize};

use crate::error::SafetyError;
use crate::geometry::{Pose, Twist, Vec3};

/// Points whose signed distance is at most this are inside; the boundary
/// itself counts as inside.
pub const BOUNDARY_TOLERANCE: f64 = 1e-9;

/// Central-difference step for the distance gradient.
pub const GRADIENT_STEP: f64 = 1e-4;

pub const MAX_DEPTH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Sphere {
        center: Vec3,
        radius: f64,
    },
    /// Capped cylinder around `axis` through `center`.
    Cylinder {
        center: Vec3,
        radius: f64,
        half_height: f64,
        axis: Vec3,
    },
    /// Inside where `dot(normal, p) >= offset`.
    HalfSpace {
        normal: Vec3,
        offset: f64,
    },
}

impl Primitive {
    pub fn distance(&self, p: Vec3) -> f64 {
        match *self {
            Primitive::Sphere { center, radius } => (p - center).norm() - radius,
            Primitive::Cylinder { center, radius, half_height, axis } => {
                let q = p - center;
                let along = q.dot(axis);
                let radial = (q - axis * along).norm();
                let dx = radial - radius;
                let dy = along.abs() - half_height;
                dx.max(dy).min(0.0) + (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt()
            }
            Primitive::HalfSpace { normal, offset } => offset - normal.dot(p),
        }
    }

    fn validate(&self) -> Result<(), SafetyError> {
        let unit = |v: Vec3, what: &str| {
            if (v.norm() - 1.0).abs() > 1e-6 || !v.is_finite() {
                Err(SafetyError::InvalidVolume(format!("{what} must be unit-norm, got {v:?}")))
            } else {
                Ok(())
            }
        };
        match *self {
            Primitive::Sphere { center, radius } => {
                if !(radius > 0.0) || !center.is_finite() || !radius.is_finite() {
                    return Err(SafetyError::InvalidVolume(format!("bad sphere radius {radius}")));
                }
            }
            Primitive::Cylinder { center, radius, half_height, axis } => {
                if !(radius > 0.0 && half_height > 0.0) || !center.is_finite() {
                    return Err(SafetyError::InvalidVolume(format!(
                        "bad cylinder radius {radius} / half_height {half_height}"
                    )));
                }
                unit(axis, "cylinder axis")?;
            }
            Primitive::HalfSpace { normal, offset } => {
                unit(normal, "half-space normal")?;
                if !offset.is_finite() {
                    return Err(SafetyError::InvalidVolume("non-finite half-space offset".into()));
                }
            }
        }
        Ok(())
    }

    fn anchor(&self) -> Option<Vec3> {
        match *self {
            Primitive::Sphere { center, .. } | Primitive::Cylinder { center, .. } => Some(center),
            Primitive::HalfSpace { .. } => None,
        }
    }
}

/// Node of the volume expression tree; serialized as `{"union": [...]}`,
/// `{"intersection": [...]}` or a bare primitive object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeNode {
    Union(Vec<VolumeNode>),
    Intersection(Vec<VolumeNode>),
    #[serde(untagged)]
    Leaf(Primitive),
}

impl VolumeNode {
    pub fn distance(&self, p: Vec3) -> f64 {
        match self {
            VolumeNode::Leaf(prim) => prim.distance(p),
            VolumeNode::Union(children) => {
                children.iter().map(|c| c.distance(p)).fold(f64::INFINITY, f64::min)
            }
            VolumeNode::Intersection(children) => {
                children.iter().map(|c| c.distance(p)).fold(f64::NEG_INFINITY, f64::max)
            }
        }
    }

    fn depth(&self) -> usize {
        match self {
            VolumeNode::Leaf(_) => 1,
            VolumeNode::Union(c) | VolumeNode::Intersection(c) => {
                1 + c.iter().map(VolumeNode::depth).max().unwrap_or(0)
            }
        }
    }

    fn validate(&self) -> Result<(), SafetyError> {
        match self {
            VolumeNode::Leaf(prim) => prim.validate(),
            VolumeNode::Union(c) | VolumeNode::Intersection(c) => {
                if c.is_empty() {
                    return Err(SafetyError::InvalidVolume("empty boolean node".into()));
                }
                c.iter().try_for_each(VolumeNode::validate)
            }
        }
    }

    fn anchors(&self, out: &mut Vec<Vec3>) {
        match self {
            VolumeNode::Leaf(prim) => out.extend(prim.anchor()),
            VolumeNode::Union(c) | VolumeNode::Intersection(c) => {
                c.iter().for_each(|n| n.anchors(out))
            }
        }
    }
}

impl From<Primitive> for VolumeNode {
    fn from(p: Primitive) -> Self {
        VolumeNode::Leaf(p)
    }
}

/// Validated, immutable workspace volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VolumeNode", into = "VolumeNode")]
pub struct WorkspaceVolume {
    root: VolumeNode,
    centroid: Option<Vec3>,
}

impl TryFrom<VolumeNode> for WorkspaceVolume {
    type Error = SafetyError;
    fn try_from(root: VolumeNode) -> Result<Self, SafetyError> {
        WorkspaceVolume::new(root)
    }
}

impl From<WorkspaceVolume> for VolumeNode {
    fn from(v: WorkspaceVolume) -> Self {
        v.root
    }
}

impl WorkspaceVolume {
    pub fn new(root: impl Into<VolumeNode>) -> Result<Self, SafetyError> {
        let root = root.into();
        root.validate()?;
        let depth = root.depth();
        if depth > MAX_DEPTH {
            return Err(SafetyError::InvalidVolume(format!(
                "tree depth {depth} exceeds {MAX_DEPTH}"
            )));
        }
        let mut anchors = Vec::new();
        root.anchors(&mut anchors);
        let mut centroid = anchors
            .iter()
            .fold(Vec3::ZERO, |acc, &a| acc + a)
            / anchors.len().max(1) as f64;
        if anchors.is_empty() {
            return Ok(WorkspaceVolume { root, centroid: None });
        }
        // The mean of the bounded primitives' centers may fall outside an
        // intersection; prefer the closest anchor that is inside.
        if root.distance(centroid) > BOUNDARY_TOLERANCE {
            if let Some(&inside) = anchors.iter().find(|&&a| root.distance(a) <= BOUNDARY_TOLERANCE) {
                centroid = inside;
            }
        }
        Ok(WorkspaceVolume { root, centroid: Some(centroid) })
    }

    pub fn sphere(center: Vec3, radius: f64) -> Result<Self, SafetyError> {
        WorkspaceVolume::new(Primitive::Sphere { center, radius })
    }

    pub fn root(&self) -> &VolumeNode {
        &self.root
    }

    /// Representative interior point used when the distance gradient is
    /// degenerate.
    pub fn centroid(&self) -> Option<Vec3> {
        self.centroid
    }

    pub fn contains(&self, p: Vec3) -> bool {
        self.distance_field(p) <= BOUNDARY_TOLERANCE
    }

    pub fn distance_field(&self, p: Vec3) -> f64 {
        self.root.distance(p)
    }

    /// Unit direction of steepest descent of the distance field at an
    /// outside point, from central differences.
    pub fn nearest_inside_direction(&self, p: Vec3) -> Result<Vec3, SafetyError> {
        let h = GRADIENT_STEP;
        let d = |q: Vec3| self.distance_field(q);
        let grad = Vec3::new(
            d(p + Vec3::X * h) - d(p - Vec3::X * h),
            d(p + Vec3::Y * h) - d(p - Vec3::Y * h),
            d(p + Vec3::Z * h) - d(p - Vec3::Z * h),
        ) / (2.0 * h);
        if grad.norm() < 1e-9 || !grad.is_finite() {
            return Err(SafetyError::TieBreak { x: p.x, y: p.y, z: p.z });
        }
        Ok(-grad / grad.norm())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SafetyConfig {
    /// Proportional gain, 1/s.
    pub gain: f64,
    /// Clamp on the corrective speed, m/s.
    pub max_speed: f64,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        SafetyConfig { gain: 2.0, max_speed: 0.5 }
    }
}

impl SafetyConfig {
    pub fn validate(&self) -> Result<(), SafetyError> {
        if !(self.gain > 0.0 && self.max_speed > 0.0) || !self.gain.is_finite() {
            return Err(SafetyError::InvalidConfig(format!(
                "gain and max_speed must be positive, got {} / {}",
                self.gain, self.max_speed
            )));
        }
        Ok(())
    }
}

/// World-frame corrective twist: zero inside the volume, otherwise a pure
/// translation back toward it with speed `min(gain * distance, max_speed)`.
pub fn safety_twist(
    vol: &WorkspaceVolume,
    pose: &Pose,
    cfg: &SafetyConfig,
) -> Result<Twist, SafetyError> {
    let p = pose.position;
    let distance = vol.distance_field(p);
    if distance <= BOUNDARY_TOLERANCE {
        return Ok(Twist::world(Vec3::ZERO, Vec3::ZERO));
    }
    let direction = match vol.nearest_inside_direction(p) {
        Ok(dir) => dir,
        Err(err) => vol
            .centroid()
            .and_then(|c| (c - p).normalized())
            .ok_or(err)?,
    };
    let speed = (cfg.gain * distance).min(cfg.max_speed);
    Ok(Twist::world(direction * speed, Vec3::ZERO))
}
