//! Browser bindings for a small interactive tour of the simulator: the
//! eye-in-hand camera view, a slice of the workspace safety field, and
//! closed-loop rollouts of the scripted teacher.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use servoclone::control::{run_episode, ControlConfig};
use servoclone::expert::{sample_initial_pose, Band, ExpertConfig, ExpertPolicy};
use servoclone::geometry::{Pose, Rotation, Vec3};
use servoclone::workspace::safety_twist;
use servoclone::world::{looking_down, World};
use wasm_bindgen::prelude::*;

#[wasm_bindgen]
pub struct Demo {
    world: World,
    ctrl: ControlConfig,
    rng: ChaCha8Rng,
}

/// Positions of one rollout relative to the hover point, flattened xyz.
#[wasm_bindgen]
pub struct Rollout {
    positions: Vec<f64>,
    success: bool,
    time_to_goal: f64,
}

#[wasm_bindgen]
impl Rollout {
    pub fn positions(&self) -> Vec<f64> {
        self.positions.clone()
    }

    pub fn success(&self) -> bool {
        self.success
    }

    /// Simulated seconds to the goal, or NaN on failure.
    #[wasm_bindgen(js_name = timeToGoal)]
    pub fn time_to_goal(&self) -> f64 {
        self.time_to_goal
    }
}

/// Camera pose at `offset` from the hover point, tilted about its own x
/// axis and then turned about its optical axis.
pub fn camera_pose(world: &World, offset: Vec3, tilt_deg: f64, yaw_deg: f64) -> Pose {
    let tilt = Rotation::from_axis_angle(Vec3::X, tilt_deg.to_radians()).expect("unit axis");
    let yaw = Rotation::from_axis_angle(Vec3::Z, yaw_deg.to_radians()).expect("unit axis");
    Pose::new(world.hover_point() + offset, looking_down().compose(&tilt).compose(&yaw))
}

fn rgba(rgb: &[u8]) -> Vec<u8> {
    rgb.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

/// Dark blue inside the workspace, then yellow to red as the corrective
/// speed grows to its clamp.
fn heat(speed: f64, max: f64) -> [u8; 4] {
    if speed == 0.0 {
        return [24, 40, 72, 255];
    }
    let s = (speed / max).clamp(0.0, 1.0);
    [230, (220.0 * (1.0 - s)) as u8 + 20, 40, 255]
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Demo {
        Demo { world: World::default(), ctrl: ControlConfig::default(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    #[wasm_bindgen(js_name = imageSize)]
    pub fn image_size(&self) -> usize {
        self.world.camera.width
    }

    /// RGBA camera image, noise-free.
    #[wasm_bindgen(js_name = cameraView)]
    pub fn camera_view(&self, dx: f64, dy: f64, dz: f64, tilt_deg: f64, yaw_deg: f64) -> Vec<u8> {
        let pose = camera_pose(&self.world, Vec3::new(dx, dy, dz), tilt_deg, yaw_deg);
        rgba(&self.world.render(&pose).to_rgb8())
    }

    /// RGBA map of the safety speed on the horizontal plane `dz` above the
    /// hover point, `span` metres wide, `size` pixels square. Image rows
    /// run along -y so +x is right and +y is up.
    #[wasm_bindgen(js_name = safetySlice)]
    pub fn safety_slice(&self, dz: f64, span: f64, size: usize) -> Vec<u8> {
        let hover = self.world.hover_point();
        let mut out = Vec::with_capacity(size * size * 4);
        for row in 0..size {
            for col in 0..size {
                let x = ((col as f64 + 0.5) / size as f64 - 0.5) * span;
                let y = (0.5 - (row as f64 + 0.5) / size as f64) * span;
                let pose = Pose::new(hover + Vec3::new(x, y, dz), looking_down());
                let speed = safety_twist(&self.world.workspace, &pose, &self.world.safety)
                    .map(|t| t.linear.norm())
                    .unwrap_or(self.world.safety.max_speed);
                out.extend(heat(speed, self.world.safety.max_speed));
            }
        }
        out
    }

    /// Runs the noisy teacher in closed loop from a fresh near- or far-band
    /// start.
    #[wasm_bindgen(js_name = expertRollout)]
    pub fn expert_rollout(&mut self, far: bool) -> Result<Rollout, JsError> {
        self.rollout(far).map_err(|e| JsError::new(&e))
    }
}

impl Demo {
    pub fn rollout(&mut self, far: bool) -> Result<Rollout, String> {
        let band = if far { Band::Far } else { Band::Near };
        let start = sample_initial_pose(&mut self.rng, band, &self.world).map_err(|e| e.to_string())?;
        let mut teacher = ExpertPolicy::new(&self.world, ExpertConfig::default(), self.rng.random());
        let out = run_episode(&mut teacher, start, &self.world, &self.ctrl, &mut self.rng).map_err(|e| e.to_string())?;
        let hover = self.world.hover_point();
        let positions = std::iter::once(start.position)
            .chain(out.trajectory.iter().map(|p| p.pose.position))
            .flat_map(|p| (p - hover).to_array())
            .collect();
        Ok(Rollout { positions, success: out.success, time_to_goal: out.time_to_goal.unwrap_or(f64::NAN) })
    }
}
