//! Success rate against demonstration time: split the demonstration pool at
//! each checkpoint, train a fresh network, and run the fixed pose protocol.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{run_episode, ControlConfig, Policy, Termination};
use crate::dataset::DemoDataset;
use crate::error::EvalError;
use crate::expert::{sample_initial_pose, Band, ExpertConfig, ExpertPolicy};
use crate::geometry::Pose;
use crate::neural::{train_with_progress, PolicyNet, TrainConfig, TrainReport};
use crate::sim::axis_error;
use crate::world::World;

pub const CSV_HEADER: &str = "checkpoint_minutes,frames,successes,trials,success_rate";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Demonstration-time marks, minutes, strictly increasing.
    pub checkpoints: Vec<f64>,
    pub near_poses: usize,
    pub far_poses: usize,
    pub trials_per_pose: usize,
    /// Seed of the evaluation pose set, shared by every checkpoint.
    pub pose_seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            checkpoints: vec![4.0, 8.0, 12.0, 16.0, 20.0],
            near_poses: 5,
            far_poses: 4,
            trials_per_pose: 2,
            pose_seed: 2024,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.checkpoints.is_empty() {
            return Err(EvalError::Config("at least one checkpoint is required".into()));
        }
        if self.checkpoints.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return Err(EvalError::Config("checkpoints must be positive minutes".into()));
        }
        if self.checkpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(EvalError::Config("checkpoints must be strictly increasing".into()));
        }
        if self.near_poses + self.far_poses == 0 || self.trials_per_pose == 0 {
            return Err(EvalError::Config("need at least one pose and one trial".into()));
        }
        Ok(())
    }

    pub fn max_minutes(&self) -> f64 {
        self.checkpoints.iter().copied().fold(0.0, f64::max)
    }

    pub fn trials_per_checkpoint(&self) -> usize {
        (self.near_poses + self.far_poses) * self.trials_per_pose
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPose {
    pub index: usize,
    pub band: Band,
    pub pose: Pose,
}

/// The fixed evaluation start poses: near band first, then far.
pub fn eval_poses(world: &World, cfg: &AblationConfig) -> Result<Vec<EvalPose>, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pose_seed);
    let bands = std::iter::repeat_n(Band::Near, cfg.near_poses).chain(std::iter::repeat_n(Band::Far, cfg.far_poses));
    bands
        .enumerate()
        .map(|(index, band)| {
            let pose = sample_initial_pose(&mut rng, band, world).map_err(|e| EvalError::Config(e.to_string()))?;
            Ok(EvalPose { index, band, pose })
        })
        .collect()
}

/// FNV-1a over the bit patterns of every pose, stable across platforms.
pub fn pose_set_hash(poses: &[EvalPose]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |v: f64| {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for p in poses {
        let q = p.pose.orientation.quaternion();
        let pos = p.pose.position;
        [pos.x, pos.y, pos.z, q[0], q[1], q[2], q[3]].into_iter().for_each(&mut eat);
    }
    format!("{h:016x}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub pose_index: usize,
    pub band: Band,
    pub trial: usize,
    pub success: bool,
    pub time_to_goal: Option<f64>,
    pub termination: Termination,
    /// Distance from the hover point at the end of the trial, m.
    pub final_position_error: f64,
    /// Optical-axis tilt at the end of the trial, rad.
    pub final_axis_error: f64,
}

fn trial_seed(master: u64, pose: usize, trial: usize) -> u64 {
    master ^ ((pose as u64) << 32 | trial as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Runs every pose × trial with a policy built by `make_policy(seed)`.
/// Observation noise and policy noise are seeded per trial, so the trials
/// of one pose differ while the whole protocol stays reproducible.
pub fn evaluate<'p>(
    world: &World,
    ctrl: &ControlConfig,
    poses: &[EvalPose],
    trials_per_pose: usize,
    seed: u64,
    mut make_policy: impl FnMut(u64) -> Box<dyn Policy + 'p>,
) -> Result<Vec<TrialOutcome>, EvalError> {
    let mut out = Vec::with_capacity(poses.len() * trials_per_pose);
    for p in poses {
        for trial in 0..trials_per_pose {
            let s = trial_seed(seed, p.index, trial);
            let mut policy = make_policy(s);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let ep = run_episode(policy.as_mut(), p.pose, world, ctrl, &mut rng)?;
            let end = ep.final_state.ee_pose;
            out.push(TrialOutcome {
                pose_index: p.index,
                band: p.band,
                trial,
                success: ep.success,
                time_to_goal: ep.time_to_goal,
                termination: ep.termination,
                final_position_error: (end.position - world.hover_point()).norm(),
                final_axis_error: axis_error(&end),
            });
        }
    }
    Ok(out)
}

/// What drives the robot during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicySource {
    /// A network trained on the checkpoint's data.
    Trained,
    /// The scripted teacher: the upper bound.
    Expert,
    /// A freshly initialized network: the floor.
    Untrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointResult {
    pub minutes: f64,
    pub frames: usize,
    pub episodes: usize,
    pub train: Option<TrainReport>,
    /// Wall-clock training time, s. Not part of the reproducible output.
    pub train_seconds: f64,
    pub successes: usize,
    pub trials: usize,
    pub success_rate: f64,
    pub outcomes: Vec<TrialOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub policy: PolicySource,
    pub pose_set_hash: String,
    pub poses: Vec<EvalPose>,
    pub checkpoints: Vec<CheckpointResult>,
    pub total_trials: usize,
}

impl AblationReport {
    pub fn empty(policy: PolicySource) -> Self {
        AblationReport { policy, pose_set_hash: pose_set_hash(&[]), poses: vec![], checkpoints: vec![], total_trials: 0 }
    }

    pub fn success_counts(&self) -> Vec<usize> {
        self.checkpoints.iter().map(|c| c.successes).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for c in &self.checkpoints {
            writeln!(s, "{},{},{},{},{:.4}", c.minutes, c.frames, c.successes, c.trials, c.success_rate).unwrap();
        }
        s
    }

    /// Bar chart of success rate per checkpoint.
    pub fn to_svg(&self) -> String {
        let (w, h, margin) = (480.0, 300.0, 40.0);
        let n = self.checkpoints.len().max(1) as f64;
        let slot = (w - 2.0 * margin) / n;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
             <line x1=\"{margin}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
             <text x=\"{margin}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">Success rate vs demonstration time</text>\n",
            y0 = h - margin,
            x1 = w - margin,
        );
        for (i, c) in self.checkpoints.iter().enumerate() {
            let bar = c.success_rate * (h - 3.0 * margin);
            let x = margin + slot * i as f64 + slot * 0.15;
            writeln!(
                s,
                "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{bar:.1}\" fill=\"#4a7ab7\"/>\n\
                 <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{:.0}%</text>\n\
                 <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{} min</text>",
                h - margin - bar,
                slot * 0.7,
                x + slot * 0.35,
                h - margin - bar - 4.0,
                c.success_rate * 100.0,
                x + slot * 0.35,
                h - margin + 16.0,
                c.minutes,
            )
            .unwrap();
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Derives the per-checkpoint training seed so every checkpoint starts from
/// its own initialization.
pub fn checkpoint_seed(master: u64, index: usize) -> u64 {
    master.wrapping_add((index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Everything `run_ablation` needs besides the data.
#[derive(Clone, Debug)]
pub struct AblationSetup<'a> {
    pub world: &'a World,
    pub ctrl: &'a ControlConfig,
    pub expert: &'a ExpertConfig,
    pub train: &'a TrainConfig,
    pub ablation: &'a AblationConfig,
    pub policy: PolicySource,
}

pub fn run_ablation(
    ds: &DemoDataset,
    setup: &AblationSetup,
    mut log: impl FnMut(&str),
) -> Result<AblationReport, EvalError> {
    let AblationSetup { world, ctrl, expert, train, ablation, policy } = *setup;
    ablation.validate()?;
    train.validate()?;
    ctrl.validate()?;
    let need = ablation.max_minutes();
    // demo time is a sum of exact control periods; allow for rounding
    if ds.total_minutes() + 1e-9 < need {
        return Err(EvalError::InsufficientData { available_minutes: ds.total_minutes(), required_minutes: need });
    }
    ds.check_dims(world.camera.width, world.camera.height)?;
    let poses = eval_poses(world, ablation)?;
    let hash = pose_set_hash(&poses);
    let mut report = AblationReport {
        policy,
        pose_set_hash: hash.clone(),
        poses: poses.clone(),
        checkpoints: vec![],
        total_trials: 0,
    };
    for (k, &minutes) in ablation.checkpoints.iter().enumerate() {
        let split = ds.split_by_time(minutes)?;
        let frames = split.frame_count();
        let seed = checkpoint_seed(train.seed, k);
        let cfg = TrainConfig { seed, ..train.clone() };
        let started = Instant::now();
        let (net, train_report) = match policy {
            PolicySource::Trained => {
                log(&format!("checkpoint {minutes} min: training on {frames} frames"));
                let (net, r) = train_with_progress(&split, &cfg, |e, l| log(&format!("  epoch {e} loss {l:.6}")))?;
                (Some(net), Some(r))
            }
            PolicySource::Untrained => {
                (Some(PolicyNet::<f32>::new(world.camera.width, world.camera.height, cfg.twist_scales, seed)?), None)
            }
            PolicySource::Expert => (None, None),
        };
        let train_seconds = started.elapsed().as_secs_f64();
        assert_eq!(pose_set_hash(&poses), hash, "pose set changed between checkpoints");
        let outcomes = match &net {
            Some(net) => evaluate(world, ctrl, &poses, ablation.trials_per_pose, train.seed, |_| Box::new(net.clone()))?,
            None => evaluate(world, ctrl, &poses, ablation.trials_per_pose, train.seed, |s| {
                Box::new(ExpertPolicy::new(world, *expert, s))
            })?,
        };
        let successes = outcomes.iter().filter(|o| o.success).count();
        let trials = outcomes.len();
        log(&format!("checkpoint {minutes} min: {successes}/{trials} successes"));
        report.total_trials += trials;
        report.checkpoints.push(CheckpointResult {
            minutes,
            frames,
            episodes: split.episodes.len(),
            train: train_report,
            train_seconds,
            successes,
            trials,
            success_rate: successes as f64 / trials as f64,
            outcomes,
        });
    }
    Ok(report)
}

/// Writes results.csv, results.json and success_rate.svg into `dir`, plus
/// the resolved configuration when given.
pub fn emit_report(report: &AblationReport, dir: &Path, config: Option<&serde_json::Value>) -> Result<(), EvalError> {
    let write = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|source| EvalError::Io { path, source })
    };
    std::fs::create_dir_all(dir).map_err(|source| EvalError::Io { path: dir.to_path_buf(), source })?;
    write("results.csv", report.to_csv().as_bytes())?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write("results.json", json.as_bytes())?;
    write("success_rate.svg", report.to_svg().as_bytes())?;
    if let Some(cfg) = config {
        write("config.json", serde_json::to_string_pretty(cfg).expect("config serializes").as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::ControlConfig;

    fn fake_checkpoint(minutes: f64, frames: usize, successes: usize) -> CheckpointResult {
        CheckpointResult {
            minutes,
            frames,
            episodes: 1,
            train: None,
            train_seconds: 0.0,
            successes,
            trials: 18,
            success_rate: successes as f64 / 18.0,
            outcomes: vec![],
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let r = AblationReport::empty(PolicySource::Trained);
        assert_eq!(r.to_csv(), format!("{CSV_HEADER}\n"));
        assert!(r.to_svg().starts_with("<svg"));
    }

    #[test]
    fn known_report_golden_csv() {
        let mut r = AblationReport::empty(PolicySource::Trained);
        r.checkpoints = vec![
            fake_checkpoint(4.0, 672, 6),
            fake_checkpoint(8.0, 1306, 12),
            fake_checkpoint(12.0, 1997, 14),
            fake_checkpoint(16.0, 2686, 18),
            fake_checkpoint(20.0, 3399, 18),
        ];
        let golden = "checkpoint_minutes,frames,successes,trials,success_rate\n\
                      4,672,6,18,0.3333\n\
                      8,1306,12,18,0.6667\n\
                      12,1997,14,18,0.7778\n\
                      16,2686,18,18,1.0000\n\
                      20,3399,18,18,1.0000\n";
        assert_eq!(r.to_csv(), golden);
        assert_eq!(r.to_csv().lines().count(), r.checkpoints.len() + 1);
        let dir = tempfile::tempdir().unwrap();
        emit_report(&r, dir.path(), None).unwrap();
        assert_eq!(std::fs::read_to_string(dir.path().join("results.csv")).unwrap(), golden);
        let back: AblationReport =
            serde_json::from_slice(&std::fs::read(dir.path().join("results.json")).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        let r = AblationReport::empty(PolicySource::Trained);
        assert!(matches!(emit_report(&r, &blocker.join("sub"), None), Err(EvalError::Io { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(AblationConfig::default().validate().is_ok());
        assert_eq!(AblationConfig::default().trials_per_checkpoint(), 18);
        let bad = AblationConfig { checkpoints: vec![4.0, 4.0], ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = AblationConfig { checkpoints: vec![], ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn poses_are_fixed_and_hashed() {
        let world = World::default();
        let cfg = AblationConfig::default();
        let a = eval_poses(&world, &cfg).unwrap();
        let b = eval_poses(&world, &cfg).unwrap();
        assert_eq!(a.len(), 9);
        assert_eq!(a.iter().filter(|p| p.band == Band::Near).count(), 5);
        assert_eq!(pose_set_hash(&a), pose_set_hash(&b));
        let other = eval_poses(&world, &AblationConfig { pose_seed: 1, ..cfg }).unwrap();
        assert_ne!(pose_set_hash(&a), pose_set_hash(&other));
        assert!(a.iter().all(|p| world.workspace.contains(p.pose.position)));
    }

    #[test]
    fn insufficient_data_lists_available_minutes() {
        let world = World::default();
        let ds = DemoDataset::new(64, 64, 3.0);
        let setup = AblationSetup {
            world: &world,
            ctrl: &ControlConfig::default(),
            expert: &ExpertConfig::default(),
            train: &TrainConfig::default(),
            ablation: &AblationConfig::default(),
            policy: PolicySource::Expert,
        };
        match run_ablation(&ds, &setup, |_| {}) {
            Err(EvalError::InsufficientData { available_minutes, required_minutes }) => {
                assert_eq!(available_minutes, 0.0);
                assert_eq!(required_minutes, 20.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn trial_times_respect_the_limit() {
        let world = World::default();
        let ctrl = ControlConfig { time_limit: 2.0, ..Default::default() };
        let cfg = AblationConfig { near_poses: 2, far_poses: 1, ..Default::default() };
        let poses = eval_poses(&world, &cfg).unwrap();
        let outcomes = evaluate(&world, &ctrl, &poses, 2, 5, |s| {
            Box::new(ExpertPolicy::new(&world, ExpertConfig::default(), s))
        })
        .unwrap();
        assert_eq!(outcomes.len(), 6);
        for o in outcomes {
            assert_eq!(o.success, o.time_to_goal.is_some());
            assert!(o.time_to_goal.is_none_or(|t| t <= ctrl.time_limit));
        }
    }
}
