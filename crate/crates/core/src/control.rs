//! Closed-loop execution: observe, query the policy, add the safety twist,
//! and step the simulator at the control rate.
//!
//! The loop advances a simulated clock in exact `1/rate` steps, so results
//! never depend on how fast the host runs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ControlError;
use crate::geometry::{twist_world_to_ee, Frame, Pose, Twist};
use crate::neural::PolicyNet;
use crate::sim::{is_success, step, Image, SimState};
use crate::workspace::safety_twist;
use crate::world::World;

/// Anything that maps an observation to an end-effector twist command.
pub trait Policy {
    fn act(&mut self, image: &Image, state: &SimState) -> Result<Twist, ControlError>;
}

impl Policy for PolicyNet<f32> {
    fn act(&mut self, image: &Image, _state: &SimState) -> Result<Twist, ControlError> {
        Ok(self.forward(image)?)
    }
}

impl<P: Policy + ?Sized> Policy for &mut P {
    fn act(&mut self, image: &Image, state: &SimState) -> Result<Twist, ControlError> {
        (**self).act(image, state)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    /// Control and camera rate, Hz.
    pub rate: f64,
    /// Episode time limit, s.
    pub time_limit: f64,
    /// Clamp applied to the policy's command before the safety twist is
    /// added, m/s and rad/s.
    pub max_linear_speed: f64,
    pub max_angular_speed: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig { rate: 30.0, time_limit: 60.0, max_linear_speed: 0.25, max_angular_speed: 0.8 }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        if !(self.rate > 0.0 && self.time_limit > 0.0 && self.max_linear_speed > 0.0 && self.max_angular_speed > 0.0) {
            return Err(ControlError::InvalidConfig(
                "rate, time_limit and speed limits must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.rate
    }
}

/// The three twists of one control step, all in the end-effector frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTwists {
    pub network: Twist,
    pub safety: Twist,
    pub applied: Twist,
}

/// Applies `command` plus the workspace safety twist for one step of `dt`.
pub fn apply_with_safety(
    world: &World,
    state: &SimState,
    command: Twist,
    dt: f64,
) -> Result<(SimState, StepTwists), ControlError> {
    if command.frame != Frame::EndEffector {
        return Err(ControlError::InvalidConfig("policy twist must be in the end-effector frame".into()));
    }
    let pose = &state.ee_pose;
    let safety = twist_world_to_ee(&safety_twist(&world.workspace, pose, &world.safety)?, pose)?;
    let applied = command.try_add(&safety)?;
    if !applied.is_finite() {
        return Err(ControlError::EmergencyStop { sim_time: state.sim_time });
    }
    let next = step(state, &applied, dt)?;
    Ok((next, StepTwists { network: command, safety, applied }))
}

/// One tick of the loop: render, forward pass, safety, aggregate, step.
pub fn control_step(
    policy: &mut dyn Policy,
    state: &SimState,
    world: &World,
    ctrl: &ControlConfig,
    rng: &mut impl Rng,
) -> Result<(SimState, StepTwists), ControlError> {
    let image = world.observe(&state.ee_pose, rng);
    let raw = policy.act(&image, state)?;
    if !raw.is_finite() {
        return Err(ControlError::EmergencyStop { sim_time: state.sim_time });
    }
    let command = raw.clamped(ctrl.max_linear_speed, ctrl.max_angular_speed);
    apply_with_safety(world, state, command, ctrl.dt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum Termination {
    Success,
    Timeout,
    EmergencyStop(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub time: f64,
    pub pose: Pose,
    pub twists: StepTwists,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub time_to_goal: Option<f64>,
    pub termination: Termination,
    pub final_state: SimState,
    pub trajectory: Vec<TrajectoryPoint>,
}

/// Runs the policy from `initial` until the goal predicate holds or the
/// time limit is reached.
pub fn run_episode(
    policy: &mut dyn Policy,
    initial: Pose,
    world: &World,
    ctrl: &ControlConfig,
    rng: &mut impl Rng,
) -> Result<EpisodeOutcome, ControlError> {
    ctrl.validate()?;
    let max_steps = (ctrl.time_limit * ctrl.rate + 1e-9).floor() as usize;
    let mut state = SimState::new(initial);
    let mut trajectory = Vec::new();
    let finish = |state: SimState, trajectory, termination: Termination| {
        let success = termination == Termination::Success;
        EpisodeOutcome {
            success,
            time_to_goal: success.then_some(state.sim_time),
            termination,
            final_state: state,
            trajectory,
        }
    };
    for k in 0..=max_steps {
        if is_success(&state, &world.scene, &world.goal) {
            return Ok(finish(state, trajectory, Termination::Success));
        }
        if k == max_steps {
            break;
        }
        match control_step(policy, &state, world, ctrl, rng) {
            Ok((next, twists)) => {
                trajectory.push(TrajectoryPoint { time: state.sim_time, pose: state.ee_pose, twists });
                state = next;
                // exact multiples of the period keep the clock drift-free
                state.sim_time = (k + 1) as f64 / ctrl.rate;
            }
            Err(ControlError::EmergencyStop { sim_time }) => {
                return Ok(finish(
                    state,
                    trajectory,
                    Termination::EmergencyStop(format!("non-finite twist at t={sim_time:.3}s")),
                ));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(finish(state, trajectory, Termination::Timeout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert::{sample_initial_pose, Band, ExpertConfig, ExpertPolicy};
    use crate::geometry::Vec3;
    use crate::neural::DEFAULT_TWIST_SCALES;
    use crate::world::looking_down;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Constant(Twist);

    impl Policy for Constant {
        fn act(&mut self, _: &Image, _: &SimState) -> Result<Twist, ControlError> {
            Ok(self.0)
        }
    }

    #[test]
    fn inside_workspace_applies_policy_twist_exactly() {
        let world = World::default();
        let state = SimState::new(Pose::new(world.hover_point() + Vec3::Z * 0.1, looking_down()));
        let t = Twist::ee(Vec3::new(0.05, -0.02, 0.01), Vec3::new(0.0, 0.1, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, tw) = control_step(&mut Constant(t), &state, &world, &ControlConfig::default(), &mut rng).unwrap();
        assert!(tw.safety.is_zero());
        assert_eq!(tw.applied, t);
    }

    #[test]
    fn zero_net_outside_applies_safety_only() {
        let world = World::default();
        let mut net = PolicyNet::<f32>::zeroed(64, 64, DEFAULT_TWIST_SCALES).unwrap();
        let state = SimState::new(Pose::new(world.hover_point() + Vec3::Z * 2.0, looking_down()));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, tw) = control_step(&mut net, &state, &world, &ControlConfig::default(), &mut rng).unwrap();
        assert!(tw.network.is_zero());
        assert!(!tw.safety.is_zero());
        assert_eq!(tw.applied, tw.safety);
    }

    #[test]
    fn both_nonzero_sum_componentwise() {
        let world = World::default();
        let state = SimState::new(Pose::new(world.hover_point() + Vec3::new(0.1, 0.0, 1.5), looking_down()));
        let t = Twist::ee(Vec3::new(0.1, 0.0, 0.0), Vec3::new(0.0, 0.0, 0.2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, tw) = control_step(&mut Constant(t), &state, &world, &ControlConfig::default(), &mut rng).unwrap();
        let (a, n, s) = (tw.applied.to_array(), tw.network.to_array(), tw.safety.to_array());
        for i in 0..6 {
            assert_eq!(a[i], n[i] + s[i]);
        }
        assert!(!tw.safety.is_zero());
    }

    #[test]
    fn non_finite_policy_output_stops_the_episode() {
        let world = World::default();
        let bad = Twist::ee(Vec3::new(f64::NAN, 0.0, 0.0), Vec3::ZERO);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = run_episode(
            &mut Constant(bad),
            Pose::new(world.hover_point() + Vec3::Z * 0.2, looking_down()),
            &world,
            &ControlConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(!out.success);
        assert!(matches!(out.termination, Termination::EmergencyStop(_)));
    }

    #[test]
    fn tiny_time_limit_times_out() {
        let world = World::default();
        let ctrl = ControlConfig { time_limit: 0.001, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let start = Pose::new(world.hover_point() + Vec3::Z * 0.2, looking_down());
        let out = run_episode(&mut Constant(Twist::zero(Frame::EndEffector)), start, &world, &ctrl, &mut rng).unwrap();
        assert_eq!(out.termination, Termination::Timeout);
        assert_eq!(out.time_to_goal, None);
    }

    #[test]
    fn expert_episode_is_deterministic() {
        let world = World::default();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let start = sample_initial_pose(&mut rng, Band::Far, &world).unwrap();
            let mut expert = ExpertPolicy::new(&world, ExpertConfig::default(), 17);
            run_episode(&mut expert, start, &world, &ControlConfig::default(), &mut rng).unwrap()
        };
        let (a, b) = (run(), run());
        assert!(a.success);
        assert!(a.time_to_goal.unwrap() <= 60.0);
        assert_eq!(a, b);
    }
}
