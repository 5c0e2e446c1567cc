//! Demonstration recording, time-based splitting and on-disk storage.
//!
//! Demonstration time only advances while recording is active, so pauses
//! (repositioning the arm or the cup) cost no data budget. Every frame
//! carries the cumulative active time at which it was captured; splitting a
//! dataset at `m` minutes keeps exactly the frames captured within the
//! first `m·60` seconds of active demonstration.
//!
//! Layout on disk:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/episode_00000/frames.bin   per frame: 6 × f32 LE twist, then
//!                                  width·height·3 × u8 RGB, row-major
//! ```

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::control::{apply_with_safety, ControlConfig, Policy};
use crate::error::{ControlError, DatasetError};
use crate::expert::{sample_initial_pose, Band, ExpertConfig, ExpertPolicy};
use crate::geometry::{Pose, Twist, Vec3};
use crate::sim::{is_success, Image, SimState};
use crate::world::World;

pub const MANIFEST_MAGIC: &str = "servoclone-demo";
pub const FORMAT_VERSION: u32 = 1;
pub const TWIST_BYTES: usize = 6 * 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// Row-major 8-bit RGB, exactly as stored on disk.
    pub pixels: Vec<u8>,
    /// Teacher command in the end-effector frame.
    pub twist: [f32; 6],
    /// Cumulative active demonstration time at capture, s.
    pub demo_time: f64,
}

impl Frame {
    pub fn image(&self, width: usize, height: usize) -> Image {
        Image::from_rgb8(width, height, &self.pixels).expect("frame matches dataset dims")
    }

    pub fn twist(&self) -> Twist {
        Twist::from_array(self.twist.map(|v| v as f64), crate::geometry::Frame::EndEffector)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Expert,
    Teleop,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: u32,
    pub source: Source,
    pub frames: Vec<Frame>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoDataset {
    pub width: usize,
    pub height: usize,
    pub record_rate: f64,
    pub episodes: Vec<Episode>,
    /// Total active demonstration time, s. At least the last frame's time.
    pub total_demo_time: f64,
}

impl DemoDataset {
    pub fn new(width: usize, height: usize, record_rate: f64) -> Self {
        DemoDataset { width, height, record_rate, episodes: Vec::new(), total_demo_time: 0.0 }
    }

    pub fn frames(&self) -> impl Iterator<Item = &Frame> {
        self.episodes.iter().flat_map(|e| e.frames.iter())
    }

    pub fn frame_count(&self) -> usize {
        self.episodes.iter().map(|e| e.frames.len()).sum()
    }

    pub fn total_minutes(&self) -> f64 {
        self.total_demo_time / 60.0
    }

    pub fn next_episode_id(&self) -> u32 {
        self.episodes.last().map_or(0, |e| e.id + 1)
    }

    /// Appends an episode whose recording was active for `active_seconds`.
    pub fn push_episode(&mut self, episode: Episode, active_seconds: f64) -> Result<(), DatasetError> {
        let dims = self.width * self.height * 3;
        if episode.frames.iter().any(|f| f.pixels.len() != dims) {
            return Err(DatasetError::Dimension(format!(
                "episode {} frames do not match {}x{}",
                episode.id, self.width, self.height
            )));
        }
        self.total_demo_time += active_seconds;
        if let Some(last) = episode.frames.last() {
            self.total_demo_time = self.total_demo_time.max(last.demo_time);
        }
        self.episodes.push(episode);
        Ok(())
    }

    /// Frames captured within the first `minutes` of active demonstration,
    /// keeping episode structure.
    pub fn split_by_time(&self, minutes: f64) -> Result<DemoDataset, DatasetError> {
        if !(minutes > 0.0) {
            return Err(DatasetError::InvalidArgument(format!("split minutes must be positive, got {minutes}")));
        }
        let cutoff = minutes * 60.0;
        let episodes: Vec<Episode> = self
            .episodes
            .iter()
            .filter_map(|e| {
                let frames: Vec<Frame> = e.frames.iter().filter(|f| f.demo_time <= cutoff).cloned().collect();
                (!frames.is_empty()).then(|| Episode { id: e.id, source: e.source, frames })
            })
            .collect();
        if episodes.is_empty() {
            return Err(DatasetError::EmptySplit { minutes });
        }
        Ok(DemoDataset {
            width: self.width,
            height: self.height,
            record_rate: self.record_rate,
            episodes,
            total_demo_time: self.total_demo_time.min(cutoff),
        })
    }

    pub fn check_dims(&self, width: usize, height: usize) -> Result<(), DatasetError> {
        if (self.width, self.height) != (width, height) {
            return Err(DatasetError::Dimension(format!(
                "dataset images are {}x{}, expected {width}x{height}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| DatasetError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let mut entries = Vec::with_capacity(self.episodes.len());
        for ep in &self.episodes {
            let rel = format!("episode_{:05}/frames.bin", ep.id);
            let path = dir.join(&rel);
            std::fs::create_dir_all(path.parent().unwrap()).map_err(io(&path))?;
            let mut bytes = Vec::with_capacity(ep.frames.len() * (TWIST_BYTES + self.width * self.height * 3));
            for f in &ep.frames {
                for v in f.twist {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                bytes.extend_from_slice(&f.pixels);
            }
            std::fs::write(&path, bytes).map_err(io(&path))?;
            entries.push(EpisodeEntry {
                id: ep.id,
                source: ep.source,
                file: rel,
                frames: ep.frames.len(),
                demo_time: ep.frames.iter().map(|f| f.demo_time).collect(),
            });
        }
        let manifest = Manifest {
            magic: MANIFEST_MAGIC.into(),
            version: FORMAT_VERSION,
            width: self.width,
            height: self.height,
            record_rate: self.record_rate,
            total_demo_time: self.total_demo_time,
            episodes: entries,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(io(&path))
    }

    pub fn load(dir: &Path) -> Result<DemoDataset, DatasetError> {
        let path = dir.join("manifest.json");
        let text = std::fs::read(&path).map_err(|source| DatasetError::Io { path: path.clone(), source })?;
        let raw: serde_json::Value = serde_json::from_slice(&text).map_err(|e| DatasetError::Version {
            path: path.clone(),
            reason: format!("manifest is not JSON: {e}"),
        })?;
        if raw.get("magic").and_then(|m| m.as_str()) != Some(MANIFEST_MAGIC) {
            return Err(DatasetError::Version { path, reason: "missing or wrong magic".into() });
        }
        let version = raw.get("version").and_then(|v| v.as_u64());
        if version != Some(FORMAT_VERSION as u64) {
            return Err(DatasetError::Version { path, reason: format!("unsupported version {version:?}") });
        }
        let manifest: Manifest =
            serde_json::from_value(raw).map_err(|e| DatasetError::Corrupt(format!("{}: {e}", path.display())))?;
        if manifest.width == 0 || manifest.height == 0 {
            return Err(DatasetError::Dimension(format!(
                "invalid image size {}x{}",
                manifest.width, manifest.height
            )));
        }
        let image_bytes = manifest.width * manifest.height * 3;
        let record = TWIST_BYTES + image_bytes;
        let mut ds = DemoDataset::new(manifest.width, manifest.height, manifest.record_rate);
        ds.total_demo_time = manifest.total_demo_time;
        for entry in manifest.episodes {
            if entry.demo_time.len() != entry.frames {
                return Err(DatasetError::Corrupt(format!(
                    "episode {} lists {} frames but {} demo times",
                    entry.id,
                    entry.frames,
                    entry.demo_time.len()
                )));
            }
            let file = dir.join(&entry.file);
            let bytes = std::fs::read(&file).map_err(|source| DatasetError::Io { path: file.clone(), source })?;
            let expected = (entry.frames * record) as u64;
            if (bytes.len() as u64) < expected {
                return Err(DatasetError::Truncated { path: file, expected, found: bytes.len() as u64 });
            }
            if bytes.len() as u64 != expected {
                return Err(DatasetError::Dimension(format!(
                    "{} holds {} bytes, {} frames of {}x{} need {expected}",
                    file.display(),
                    bytes.len(),
                    entry.frames,
                    manifest.width,
                    manifest.height
                )));
            }
            let frames = bytes
                .chunks_exact(record)
                .zip(&entry.demo_time)
                .map(|(chunk, &demo_time)| {
                    let mut twist = [0f32; 6];
                    for (i, t) in twist.iter_mut().enumerate() {
                        *t = f32::from_le_bytes(chunk[i * 4..i * 4 + 4].try_into().unwrap());
                    }
                    Frame { pixels: chunk[TWIST_BYTES..].to_vec(), twist, demo_time }
                })
                .collect();
            ds.episodes.push(Episode { id: entry.id, source: entry.source, frames });
        }
        Ok(ds)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    magic: String,
    version: u32,
    width: usize,
    height: usize,
    record_rate: f64,
    total_demo_time: f64,
    episodes: Vec<EpisodeEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeEntry {
    id: u32,
    source: Source,
    file: String,
    frames: usize,
    demo_time: Vec<f64>,
}

/// Frame capture for one episode. Called once per control step; captures
/// at `record_rate` measured in active (recording) control steps.
#[derive(Clone, Debug)]
pub struct Recorder {
    control_rate: f64,
    record_rate: f64,
    demo_time_offset: f64,
    active_steps: u64,
    episode: Episode,
}

impl Recorder {
    pub fn new(
        control_rate: f64,
        record_rate: f64,
        demo_time_offset: f64,
        id: u32,
        source: Source,
    ) -> Result<Self, DatasetError> {
        if !(record_rate > 0.0 && record_rate <= control_rate) {
            return Err(DatasetError::InvalidArgument(format!(
                "record_rate must lie in (0, {control_rate}] Hz, got {record_rate}"
            )));
        }
        Ok(Recorder {
            control_rate,
            record_rate,
            demo_time_offset,
            active_steps: 0,
            episode: Episode { id, source, frames: Vec::new() },
        })
    }

    fn capture_due(&self) -> bool {
        let i = self.active_steps;
        if i == 0 {
            return true;
        }
        let slot = |k: u64| (k as f64 * self.record_rate / self.control_rate + 1e-9).floor();
        slot(i) > slot(i - 1)
    }

    /// Registers one control step. When `recording`, the step counts toward
    /// demonstration time and the frame is captured if a capture is due.
    /// Returns whether a frame was captured.
    pub fn tick(&mut self, recording: bool, image: &Image, command: &Twist) -> bool {
        if !recording {
            return false;
        }
        let captured = self.capture_due();
        if captured {
            self.episode.frames.push(Frame {
                pixels: image.to_rgb8(),
                twist: command.to_array().map(|v| v as f32),
                demo_time: self.demo_time_offset + self.active_steps as f64 / self.control_rate,
            });
        }
        self.active_steps += 1;
        captured
    }

    pub fn active_seconds(&self) -> f64 {
        self.active_steps as f64 / self.control_rate
    }

    pub fn frame_count(&self) -> usize {
        self.episode.frames.len()
    }

    /// Closes the episode; returns it with its active duration.
    pub fn finish(self) -> Result<(Episode, f64), DatasetError> {
        let secs = self.active_seconds();
        if self.episode.frames.is_empty() {
            return Err(DatasetError::EmptyEpisode);
        }
        Ok((self.episode, secs))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecordingConfig {
    /// Capture rate while recording, Hz.
    pub record_rate: f64,
    /// Longest single demonstration, s.
    pub max_episode_time: f64,
    /// Share of demonstrations started from the near band.
    pub near_fraction: f64,
    /// Recording continues this long after the teacher first reaches the
    /// goal, so the data covers the final approach, s.
    pub settle_time: f64,
    /// Drift added to the executed command but not to the recorded label,
    /// so the data covers recoveries from off-path states. Off by default.
    pub perturbation: Perturbation,
}

impl Default for RecordingConfig {
    fn default() -> Self {
        RecordingConfig {
            record_rate: 3.0,
            max_episode_time: 60.0,
            near_fraction: 5.0 / 9.0,
            settle_time: 0.0,
            perturbation: Perturbation::NONE,
        }
    }
}

/// Ornstein-Uhlenbeck drift on the executed twist. `Default` gives a
/// moderate drift; [`Perturbation::NONE`] turns it off.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Perturbation {
    /// Stationary std of each linear component, m/s.
    pub linear_std: f64,
    /// Stationary std of each angular component, rad/s.
    pub angular_std: f64,
    /// Correlation time, s.
    pub tau: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Perturbation { linear_std: 0.05, angular_std: 0.15, tau: 0.5 }
    }
}

impl Perturbation {
    pub const NONE: Perturbation = Perturbation { linear_std: 0.0, angular_std: 0.0, tau: 0.5 };

    pub fn is_none(&self) -> bool {
        self.linear_std == 0.0 && self.angular_std == 0.0
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.linear_std >= 0.0 && self.angular_std >= 0.0 && self.tau > 0.0) {
            return Err("perturbation stds must be non-negative and tau positive".into());
        }
        Ok(())
    }
}

/// Running state of a [`Perturbation`] sampled at a fixed period.
struct Drift {
    state: [f64; 6],
    decay: f64,
    kick: [f64; 6],
}

impl Drift {
    fn new(p: &Perturbation, dt: f64, rng: &mut impl Rng) -> Drift {
        let decay = (-dt / p.tau).exp();
        let std = [p.linear_std, p.linear_std, p.linear_std, p.angular_std, p.angular_std, p.angular_std];
        let mut state = [0.0; 6];
        for (s, sd) in state.iter_mut().zip(std) {
            *s = sd * rng.sample::<f64, _>(StandardNormal);
        }
        let kick = std.map(|sd| sd * (1.0 - decay * decay).sqrt());
        Drift { state, decay, kick }
    }

    fn next(&mut self, rng: &mut impl Rng) -> [f64; 6] {
        let current = self.state;
        for (s, k) in self.state.iter_mut().zip(self.kick) {
            *s = *s * self.decay + k * rng.sample::<f64, _>(StandardNormal);
        }
        current
    }
}

/// Drives the simulator with `teacher` (plus the safety twist) from
/// `initial`, capturing frames while `recording(sim_time)` holds. Ends at
/// `settle` seconds after first reaching the goal when given, or after
/// `max_time` seconds. The recorded label is always the teacher's own
/// command; `perturbation` only disturbs what is executed.
#[allow(clippy::too_many_arguments)]
pub fn record_episode(
    teacher: &mut dyn Policy,
    world: &World,
    initial: Pose,
    ctrl: &ControlConfig,
    record_rate: f64,
    max_time: f64,
    settle: Option<f64>,
    perturbation: &Perturbation,
    mut recording: impl FnMut(f64) -> bool,
    demo_time_offset: f64,
    id: u32,
    source: Source,
    rng: &mut impl Rng,
) -> Result<(Episode, f64), DatasetError> {
    let mut recorder = Recorder::new(ctrl.rate, record_rate, demo_time_offset, id, source)?;
    let mut state = SimState::new(initial);
    let steps = (max_time * ctrl.rate + 1e-9).floor() as u64;
    let mut reached: Option<f64> = None;
    let mut drift = (!perturbation.is_none()).then(|| Drift::new(perturbation, ctrl.dt(), rng));
    for k in 0..steps {
        if let Some(settle) = settle {
            if reached.is_none() && is_success(&state, &world.scene, &world.goal) {
                reached = Some(state.sim_time);
            }
            if reached.is_some_and(|t| state.sim_time - t >= settle - 1e-9) {
                break;
            }
        }
        let image = world.observe(&state.ee_pose, rng);
        let command = teacher.act(&image, &state).map_err(control_to_dataset)?;
        recorder.tick(recording(state.sim_time), &image, &command);
        let executed = match drift.as_mut() {
            Some(d) => {
                let n = d.next(rng);
                Twist::new(
                    command.linear + Vec3::new(n[0], n[1], n[2]),
                    command.angular + Vec3::new(n[3], n[4], n[5]),
                    command.frame,
                )
            }
            None => command,
        };
        let (next, _) = apply_with_safety(world, &state, executed, ctrl.dt()).map_err(control_to_dataset)?;
        state = next;
        state.sim_time = (k + 1) as f64 / ctrl.rate;
    }
    recorder.finish()
}

fn control_to_dataset(e: ControlError) -> DatasetError {
    match e {
        ControlError::Safety(s) => DatasetError::Safety(s),
        ControlError::Sim(s) => DatasetError::Sim(s),
        other => DatasetError::InvalidArgument(other.to_string()),
    }
}

/// Scripted-teacher demonstrations totalling at least `minutes` of active
/// recording, starting each from a fresh near- or far-band pose.
pub fn generate_expert_dataset(
    world: &World,
    expert: &ExpertConfig,
    ctrl: &ControlConfig,
    rec: &RecordingConfig,
    minutes: f64,
    seed: u64,
) -> Result<DemoDataset, DatasetError> {
    if !(minutes > 0.0) {
        return Err(DatasetError::InvalidArgument(format!("minutes must be positive, got {minutes}")));
    }
    world.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = DemoDataset::new(world.camera.width, world.camera.height, rec.record_rate);
    while ds.total_demo_time < minutes * 60.0 {
        let band = if rng.random_bool(rec.near_fraction.clamp(0.0, 1.0)) { Band::Near } else { Band::Far };
        let start = sample_initial_pose(&mut rng, band, world)?;
        // past the goal the teacher keeps converging instead of idling
        let teacher_cfg = ExpertConfig { stop_when_success: expert.stop_when_success && rec.settle_time <= 0.0, ..*expert };
        let mut teacher = ExpertPolicy::new(world, teacher_cfg, rng.random());
        let mut episode_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let (episode, secs) = record_episode(
            &mut teacher,
            world,
            start,
            ctrl,
            rec.record_rate,
            rec.max_episode_time,
            Some(rec.settle_time),
            &rec.perturbation,
            |_| true,
            ds.total_demo_time,
            ds.next_episode_id(),
            Source::Expert,
            &mut episode_rng,
        )?;
        ds.push_episode(episode, secs)?;
    }
    Ok(ds)
}

/// Relative path of an episode's frame file inside a dataset directory.
pub fn episode_file(dir: &Path, id: u32) -> PathBuf {
    dir.join(format!("episode_{id:05}/frames.bin"))
}
