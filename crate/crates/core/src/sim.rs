//! Kinematic desk world: a cup standing on a table seen through a pinhole
//! camera rigidly mounted on the end-effector.
//!
//! Camera frame equals the end-effector frame: +Z is the optical axis, +X
//! points along image columns (u) and +Y along image rows (v).

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::geometry::{integrate_pose, Pose, Twist, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        CameraIntrinsics::square(64, 32.0)
    }
}

impl CameraIntrinsics {
    /// Square image with the principal point at the image center.
    pub fn square(size: usize, focal: f64) -> Self {
        CameraIntrinsics {
            width: size,
            height: size,
            fx: focal,
            fy: focal,
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.width < 16 || self.height < 16 {
            return Err(SimError::InvalidConfig(format!(
                "image must be at least 16x16, got {}x{}",
                self.width, self.height
            )));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(SimError::InvalidConfig("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx <= self.width as f64 && self.cy >= 0.0 && self.cy <= self.height as f64) {
            return Err(SimError::InvalidConfig("principal point outside the image".into()));
        }
        Ok(())
    }

    /// Projects a camera-frame point; `None` when it is not in front.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        (p.z > 1e-9).then(|| (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }
}

pub type Rgb = [f64; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scene {
    /// Center of the cup's base, on the table.
    pub cup_position: Vec3,
    pub cup_radius: f64,
    pub cup_height: f64,
    pub cup_color: Rgb,
    pub table_color: Rgb,
    pub background_color: Rgb,
    pub table_plane_z: f64,
    /// Brightness factor for the cup's side wall relative to its top.
    pub cup_side_shade: f64,
}

impl Default for Scene {
    fn default() -> Self {
        Scene {
            cup_position: Vec3::new(0.5, 0.0, 0.0),
            cup_radius: 0.04,
            cup_height: 0.10,
            cup_color: [0.85, 0.15, 0.10],
            table_color: [0.55, 0.50, 0.42],
            background_color: [0.15, 0.18, 0.25],
            table_plane_z: 0.0,
            cup_side_shade: 0.6,
        }
    }
}

impl Scene {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.cup_radius > 0.0 && self.cup_height > 0.0) {
            return Err(SimError::InvalidConfig("cup radius and height must be positive".into()));
        }
        let colors = [self.cup_color, self.table_color, self.background_color];
        if colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(SimError::InvalidConfig("colors must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.cup_side_shade) {
            return Err(SimError::InvalidConfig("cup_side_shade must lie in [0, 1]".into()));
        }
        if !self.cup_position.is_finite() || !self.table_plane_z.is_finite() {
            return Err(SimError::InvalidConfig("non-finite scene geometry".into()));
        }
        Ok(())
    }

    pub fn cup_top_z(&self) -> f64 {
        self.cup_position.z + self.cup_height
    }

    pub fn cup_top_center(&self) -> Vec3 {
        Vec3::new(self.cup_position.x, self.cup_position.y, self.cup_top_z())
    }

    /// Target end-effector position for the servoing task.
    pub fn hover_point(&self, goal: &GoalSpec) -> Vec3 {
        self.cup_top_center() + Vec3::Z * goal.hover_height
    }

    pub fn side_color(&self) -> Rgb {
        self.cup_color.map(|c| c * self.cup_side_shade)
    }
}

/// Row-major RGB image with channels in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend(color.iter().map(|&c| c as f32));
        }
        Image { width, height, pixels }
    }

    pub fn pixel(&self, u: usize, v: usize) -> [f32; 3] {
        let i = (v * self.width + u) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// 8-bit quantization, `round(255 * v)`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self, SimError> {
        if bytes.len() != width * height * 3 {
            return Err(SimError::InvalidConfig(format!(
                "expected {} bytes for a {width}x{height} image, got {}",
                width * height * 3,
                bytes.len()
            )));
        }
        Ok(Image { width, height, pixels: bytes.iter().map(|&b| b as f32 / 255.0).collect() })
    }

    /// Binary PPM (P6, 8-bit).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_rgb8());
        out
    }

    pub fn write_ppm(&self, path: &Path) -> std::io::Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_ppm())
    }

    /// Adds i.i.d. Gaussian noise to every channel and clamps to [0, 1].
    pub fn add_noise(&mut self, rng: &mut impl Rng, std: f64) {
        if std <= 0.0 {
            return;
        }
        let normal = Normal::new(0.0, std).expect("positive std");
        for v in &mut self.pixels {
            *v = (*v + normal.sample(rng) as f32).clamp(0.0, 1.0);
        }
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Surface {
    Table,
    CupTop,
    CupSide,
}

fn cast(scene: &Scene, origin: Vec3, dir: Vec3) -> Option<Surface> {
    let mut best = f64::INFINITY;
    let mut hit = None;
    let mut consider = |t: f64, s: Surface| {
        if t > 1e-9 && t < best {
            best = t;
            hit = Some(s);
        }
    };

    if dir.z.abs() > 1e-12 {
        consider((scene.table_plane_z - origin.z) / dir.z, Surface::Table);
        let top = scene.cup_top_z();
        let t = (top - origin.z) / dir.z;
        let p = origin + dir * t;
        let (dx, dy) = (p.x - scene.cup_position.x, p.y - scene.cup_position.y);
        if dx * dx + dy * dy <= scene.cup_radius * scene.cup_radius {
            consider(t, Surface::CupTop);
        }
    }

    // lateral surface: |(o + t d)_xy - c_xy| = r
    let (ox, oy) = (origin.x - scene.cup_position.x, origin.y - scene.cup_position.y);
    let a = dir.x * dir.x + dir.y * dir.y;
    if a > 1e-12 {
        let b = 2.0 * (ox * dir.x + oy * dir.y);
        let c = ox * ox + oy * oy - scene.cup_radius * scene.cup_radius;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                let z = origin.z + dir.z * t;
                if z >= scene.cup_position.z && z <= scene.cup_top_z() {
                    consider(t, Surface::CupSide);
                }
            }
        }
    }
    hit
}

/// Flat-shaded ray-cast rendering of the scene from `camera_pose`.
/// Deterministic: identical inputs produce bit-identical images.
pub fn render(scene: &Scene, camera_pose: &Pose, intr: &CameraIntrinsics) -> Image {
    let mut img = Image::filled(intr.width, intr.height, scene.background_color);
    if !camera_pose.is_finite() {
        return img;
    }
    let side = scene.side_color();
    let origin = camera_pose.position;
    for v in 0..intr.height {
        for u in 0..intr.width {
            let ray_cam = Vec3::new(
                (u as f64 + 0.5 - intr.cx) / intr.fx,
                (v as f64 + 0.5 - intr.cy) / intr.fy,
                1.0,
            );
            let dir = camera_pose.orientation.rotate(ray_cam);
            let color = match cast(scene, origin, dir) {
                None => continue,
                Some(Surface::Table) => scene.table_color,
                Some(Surface::CupTop) => scene.cup_color,
                Some(Surface::CupSide) => side,
            };
            let i = (v * intr.width + u) * 3;
            for k in 0..3 {
                img.pixels[i + k] = color[k] as f32;
            }
        }
    }
    img
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub ee_pose: Pose,
    pub sim_time: f64,
}

impl SimState {
    pub fn new(ee_pose: Pose) -> Self {
        SimState { ee_pose, sim_time: 0.0 }
    }
}

pub fn step(state: &SimState, twist: &Twist, dt: f64) -> Result<SimState, SimError> {
    let ee_pose = integrate_pose(&state.ee_pose, twist, dt)?;
    Ok(SimState { ee_pose, sim_time: state.sim_time + dt })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GoalSpec {
    /// Height of the goal point above the cup rim, m.
    pub hover_height: f64,
    pub pos_tolerance: f64,
    /// Allowed angle between the optical axis and straight down, rad.
    pub axis_tolerance: f64,
}

impl Default for GoalSpec {
    fn default() -> Self {
        GoalSpec { hover_height: 0.05, pos_tolerance: 0.03, axis_tolerance: 10f64.to_radians() }
    }
}

impl GoalSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.pos_tolerance > 0.0 && self.axis_tolerance > 0.0) {
            return Err(SimError::InvalidConfig("goal tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// Angle between the camera's optical axis and world -Z.
pub fn axis_error(pose: &Pose) -> f64 {
    let axis = pose.orientation.rotate(Vec3::Z);
    (-axis.z).clamp(-1.0, 1.0).acos()
}

pub fn is_success(state: &SimState, scene: &Scene, goal: &GoalSpec) -> bool {
    let p = state.ee_pose.position;
    let horizontal = ((p.x - scene.cup_position.x).powi(2) + (p.y - scene.cup_position.y).powi(2)).sqrt();
    let vertical = (p.z - scene.hover_point(goal).z).abs();
    horizontal <= goal.pos_tolerance
        && vertical <= goal.pos_tolerance
        && axis_error(&state.ee_pose) <= goal.axis_tolerance
}
