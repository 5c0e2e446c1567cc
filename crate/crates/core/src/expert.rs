//! Scripted teacher with access to the true end-effector state.
//!
//! The teacher flies the camera to the hover point above the cup while
//! rotating the optical axis to point straight down, both with clamped
//! proportional control. It also supplies the varied initial states for
//! demonstrations and evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::control::Policy;
use crate::error::{ControlError, SimError};
use crate::geometry::{Pose, Rotation, Twist, Vec3};
use crate::sim::{is_success, GoalSpec, Image, Scene, SimState};
use crate::world::{looking_down, World};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertConfig {
    pub kp_lin: f64,
    pub kp_ang: f64,
    pub max_lin: f64,
    pub max_ang: f64,
    pub stop_when_success: bool,
    /// Std of the Gaussian added to each linear component, m/s.
    pub noise_std: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            kp_lin: 1.5,
            kp_ang: 1.5,
            max_lin: 0.25,
            max_ang: 0.8,
            stop_when_success: true,
            noise_std: 0.01,
        }
    }
}

impl ExpertConfig {
    pub fn noiseless(self) -> Self {
        ExpertConfig { noise_std: 0.0, ..self }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [self.kp_lin, self.kp_ang, self.max_lin, self.max_ang];
        if positive.iter().any(|v| !(*v > 0.0)) || !(self.noise_std >= 0.0) {
            return Err(SimError::InvalidConfig("expert gains and limits must be positive".into()));
        }
        Ok(())
    }
}

/// World-frame rotation vector that turns the optical axis onto world -Z.
pub fn axis_alignment_error(pose: &Pose) -> Vec3 {
    let axis = pose.orientation.rotate(Vec3::Z);
    Rotation::between(axis, -Vec3::Z).to_rotation_vector()
}

/// The teacher's end-effector-frame command for the current state.
pub fn expert_twist(
    state: &SimState,
    scene: &Scene,
    goal: &GoalSpec,
    cfg: &ExpertConfig,
    rng: &mut impl Rng,
) -> Twist {
    if cfg.stop_when_success && is_success(state, scene, goal) {
        return Twist::ee(Vec3::ZERO, Vec3::ZERO);
    }
    let pose = &state.ee_pose;
    let to_goal = scene.hover_point(goal) - pose.position;
    let mut linear = pose.orientation.inverse_rotate(to_goal * cfg.kp_lin);
    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).expect("positive std");
        linear += Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
    }
    let angular = pose.orientation.inverse_rotate(axis_alignment_error(pose) * cfg.kp_ang);
    Twist::ee(linear.clamp_norm(cfg.max_lin), angular.clamp_norm(cfg.max_ang))
}

/// The teacher as a closed-loop [`Policy`], with its own noise stream.
pub struct ExpertPolicy<'w> {
    world: &'w World,
    cfg: ExpertConfig,
    rng: ChaCha8Rng,
}

impl<'w> ExpertPolicy<'w> {
    pub fn new(world: &'w World, cfg: ExpertConfig, seed: u64) -> Self {
        ExpertPolicy { world, cfg, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Policy for ExpertPolicy<'_> {
    fn act(&mut self, _image: &Image, state: &SimState) -> Result<Twist, ControlError> {
        Ok(expert_twist(state, &self.world.scene, &self.world.goal, &self.cfg, &mut self.rng))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    Near,
    Far,
}

impl Band {
    /// Distance range from the hover point, m.
    pub fn range(self) -> (f64, f64) {
        match self {
            Band::Near => (0.10, 0.25),
            Band::Far => (0.30, 0.60),
        }
    }
}

pub const MAX_TILT: f64 = 25.0 * std::f64::consts::PI / 180.0;
pub const SAMPLE_ATTEMPTS: usize = 1000;
/// Initial poses must show the cup rim center at least this far inside
/// the image border, pixels.
pub const VISIBILITY_MARGIN: f64 = 4.0;

/// Random start pose in `band`: position at a uniform distance from the
/// hover point in a uniform direction, orientation straight down perturbed
/// about a uniform axis by a uniform angle up to 25°. Rejection-sampled to
/// lie inside the workspace with the cup in view.
pub fn sample_initial_pose(rng: &mut impl Rng, band: Band, world: &World) -> Result<Pose, SimError> {
    let (lo, hi) = band.range();
    let hover = world.hover_point();
    for _ in 0..SAMPLE_ATTEMPTS {
        let dir: [f64; 3] = UnitSphere.sample(rng);
        let r = rng.random_range(lo..=hi);
        let position = hover + Vec3::from(dir) * r;
        let axis: [f64; 3] = UnitSphere.sample(rng);
        let tilt = Rotation::from_rotation_vector(Vec3::from(axis) * rng.random_range(0.0..=MAX_TILT));
        let pose = Pose::new(position, looking_down().compose(&tilt));
        if world.workspace.contains(position) && world.cup_visible(&pose, VISIBILITY_MARGIN) {
            return Ok(pose);
        }
    }
    Err(SimError::InvalidConfig(format!(
        "no {band:?} start pose inside the workspace with the cup in view after {SAMPLE_ATTEMPTS} tries"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Frame;
    use crate::sim::{axis_error, step};

    #[test]
    fn zero_at_goal() {
        let world = World::default();
        let state = SimState::new(Pose::new(world.hover_point(), looking_down()));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = expert_twist(&state, &world.scene, &world.goal, &ExpertConfig::default(), &mut rng);
        assert_eq!(t, Twist::zero(Frame::EndEffector));
    }

    #[test]
    fn proportional_and_clamped() {
        let world = World::default();
        let cfg = ExpertConfig { kp_lin: 1.0, noise_std: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let state = SimState::new(Pose::new(world.hover_point() + Vec3::X * 0.2, Rotation::IDENTITY));
        let t = expert_twist(&state, &world.scene, &world.goal, &cfg, &mut rng);
        assert!((t.linear - Vec3::new(-0.2, 0.0, 0.0)).norm() < 1e-12);

        let cfg = ExpertConfig { max_lin: 0.3, noise_std: 0.0, ..Default::default() };
        let state = SimState::new(Pose::new(world.hover_point() + Vec3::new(3.0, 4.0, 0.0), looking_down()));
        let t = expert_twist(&state, &world.scene, &world.goal, &cfg, &mut rng);
        assert!((t.linear.norm() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn alignment_rotates_toward_down() {
        let world = World::default();
        let cfg = ExpertConfig::default().noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tilt = Rotation::from_axis_angle(Vec3::new(1.0, 2.0, 0.5), 0.4).unwrap();
        let mut state = SimState::new(Pose::new(world.hover_point(), looking_down().compose(&tilt)));
        let before = axis_error(&state.ee_pose);
        for _ in 0..5 {
            let t = expert_twist(&state, &world.scene, &world.goal, &cfg, &mut rng);
            state = step(&state, &Twist::ee(Vec3::ZERO, t.angular), 1.0 / 30.0).unwrap();
        }
        assert!(axis_error(&state.ee_pose) < before);
    }

    #[test]
    fn continuous_in_state() {
        let world = World::default();
        let cfg = ExpertConfig::default().noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let pose = sample_initial_pose(&mut rng, Band::Near, &world).unwrap();
            let a = SimState::new(pose);
            let mut b = a;
            b.ee_pose.position += Vec3::new(1e-6, -1e-6, 1e-6) / 3f64.sqrt();
            let ta = expert_twist(&a, &world.scene, &world.goal, &cfg, &mut rng);
            let tb = expert_twist(&b, &world.scene, &world.goal, &cfg, &mut rng);
            assert!((ta.linear - tb.linear).norm() <= 1e-4);
            assert!((ta.angular - tb.angular).norm() <= 1e-4);
        }
    }

    #[test]
    fn near_samples_in_band_and_workspace() {
        let world = World::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for band in [Band::Near, Band::Far] {
            let (lo, hi) = band.range();
            for _ in 0..1000 {
                let pose = sample_initial_pose(&mut rng, band, &world).unwrap();
                let d = (pose.position - world.hover_point()).norm();
                assert!(d >= lo - 1e-12 && d <= hi + 1e-12, "{band:?} {d}");
                assert!(world.workspace.contains(pose.position));
                assert!(axis_error(&pose) <= MAX_TILT + 1e-9);
            }
        }
    }

    #[test]
    fn seeded_sample_is_reproducible() {
        let world = World::default();
        let a = sample_initial_pose(&mut ChaCha8Rng::seed_from_u64(42), Band::Far, &world).unwrap();
        let b = sample_initial_pose(&mut ChaCha8Rng::seed_from_u64(42), Band::Far, &world).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn impossible_band_is_a_config_error() {
        let world = World {
            workspace: crate::workspace::WorkspaceVolume::sphere(World::default().hover_point(), 0.05).unwrap(),
            ..World::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(sample_initial_pose(&mut rng, Band::Far, &world).is_err());
    }

    #[test]
    fn closed_loop_expert_always_succeeds() {
        let world = World::default();
        let cfg = ExpertConfig::default().noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for i in 0..100 {
            let band = if i % 2 == 0 { Band::Near } else { Band::Far };
            let mut state = SimState::new(sample_initial_pose(&mut rng, band, &world).unwrap());
            let mut ok = false;
            while state.sim_time < 60.0 {
                if is_success(&state, &world.scene, &world.goal) {
                    ok = true;
                    break;
                }
                let t = expert_twist(&state, &world.scene, &world.goal, &cfg, &mut rng);
                state = step(&state, &t, 1.0 / 30.0).unwrap();
            }
            assert!(ok, "expert failed from {:?}", state.ee_pose);
        }
    }
}
