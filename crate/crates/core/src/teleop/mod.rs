//! Live teleoperation over WebSocket: the human teacher sees the camera
//! stream, sends twists, and toggles recording.
//!
//! Client to server, JSON text:
//!
//! ```text
//! {"type":"twist","v":[vx,vy,vz,wx,wy,wz],"seq":n}
//! {"type":"record","on":true}
//! {"type":"reset"}
//! {"type":"end_session"}
//! ```
//!
//! Server to client: binary frames (16-byte little-endian header "SVCF",
//! u16 width, u16 height, f32 sim_time, u8 recording, 3 pad bytes, then
//! RGB) and JSON status or error messages.
//!
//! All simulator mutation happens on the session thread in message order.
//! The commanded twist is clamped to the control limits and summed with the
//! safety twist, so the teacher is protected by the workspace as well.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{apply_with_safety, ControlConfig};
use crate::dataset::{DemoDataset, Recorder, Source};
use crate::error::{DatasetError, TeleopError};
use crate::expert::{sample_initial_pose, Band};
use crate::geometry::{Frame, Pose, Twist};
use crate::sim::{Image, SimState};
use crate::world::World;

#[cfg(feature = "server")]
mod server;
#[cfg(feature = "server")]
pub use server::TeleopServer;

pub const FRAME_MAGIC: [u8; 4] = *b"SVCF";
pub const FRAME_HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Twist {
        v: [f64; 6],
        #[serde(default)]
        seq: u64,
    },
    Record {
        on: bool,
    },
    Reset,
    EndSession,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Status {
        demo_time: f64,
        episodes: usize,
        frames: usize,
        recording: bool,
        seq: u64,
    },
    Error {
        message: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameMessage {
    pub width: usize,
    pub height: usize,
    pub sim_time: f32,
    pub recording: bool,
    pub rgb: Vec<u8>,
}

pub fn encode_frame(image: &Image, sim_time: f64, recording: bool) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + image.width * image.height * 3);
    out.extend_from_slice(&FRAME_MAGIC);
    out.extend_from_slice(&(image.width as u16).to_le_bytes());
    out.extend_from_slice(&(image.height as u16).to_le_bytes());
    out.extend_from_slice(&(sim_time as f32).to_le_bytes());
    out.push(recording as u8);
    out.extend_from_slice(&[0; 3]);
    out.extend_from_slice(&image.to_rgb8());
    out
}

pub fn decode_frame(bytes: &[u8]) -> Result<FrameMessage, String> {
    if bytes.len() < FRAME_HEADER_LEN {
        return Err(format!("frame of {} bytes is shorter than the header", bytes.len()));
    }
    if bytes[..4] != FRAME_MAGIC {
        return Err("bad frame magic".into());
    }
    let width = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let height = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let sim_time = f32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let rgb = &bytes[FRAME_HEADER_LEN..];
    if rgb.len() != width * height * 3 {
        return Err(format!("payload of {} bytes does not match {width}x{height}", rgb.len()));
    }
    Ok(FrameMessage { width, height, sim_time, recording: bytes[12] != 0, rgb: rgb.to_vec() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    /// The server ticks at the control rate against the wall clock and
    /// holds the most recent twist between messages.
    Wall,
    /// Every twist message advances the simulator by exactly one control
    /// period. The client is the clock; used for scripted sessions.
    Lockstep,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeleopConfig {
    pub clock: Clock,
    /// Simulated seconds per wall second under the wall clock.
    pub pacing: f64,
    /// Steps between periodic status messages.
    pub status_every: usize,
    /// Seed for start poses and camera noise.
    pub seed: u64,
}

impl Default for TeleopConfig {
    fn default() -> Self {
        TeleopConfig { clock: Clock::Wall, pacing: 1.0, status_every: 10, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub episodes: usize,
    pub frames: usize,
    pub demo_time: f64,
    pub steps: u64,
    pub saved_to: Option<PathBuf>,
}

/// Simulator, recorder and dataset of one teaching session.
pub struct TeleopSession {
    pub world: World,
    pub ctrl: ControlConfig,
    pub cfg: TeleopConfig,
    pub record_rate: f64,
    pub dataset: DemoDataset,
    pub state: SimState,
    out: Option<PathBuf>,
    rng: ChaCha8Rng,
    recorder: Recorder,
    recording: bool,
    command: Twist,
    seq: u64,
    steps: u64,
    image: Image,
    demo_limit: Option<f64>,
}

impl TeleopSession {
    /// Starts at `start`, or at a sampled start pose when `None`. The
    /// dataset is written to `out` when the session ends.
    pub fn new(
        world: World,
        ctrl: ControlConfig,
        cfg: TeleopConfig,
        record_rate: f64,
        start: Option<Pose>,
        out: Option<PathBuf>,
    ) -> Result<Self, TeleopError> {
        world.validate().map_err(DatasetError::from)?;
        ctrl.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let pose = match start {
            Some(p) => p,
            None => sample_start(&world, &mut rng)?,
        };
        let dataset = DemoDataset::new(world.camera.width, world.camera.height, record_rate);
        let recorder = Recorder::new(ctrl.rate, record_rate, 0.0, 0, Source::Teleop)?;
        let state = SimState::new(pose);
        let image = world.observe(&state.ee_pose, &mut rng);
        Ok(TeleopSession {
            world,
            ctrl,
            cfg,
            record_rate,
            dataset,
            state,
            out,
            rng,
            recorder,
            recording: false,
            command: Twist::zero(Frame::EndEffector),
            seq: 0,
            steps: 0,
            image,
            demo_limit: None,
        })
    }

    /// Ends the session once this much demonstration time is recorded, s.
    pub fn with_demo_limit(mut self, seconds: f64) -> Self {
        self.demo_limit = Some(seconds);
        self
    }

    pub fn demo_complete(&self) -> bool {
        self.demo_limit.is_some_and(|l| self.demo_time() >= l - 1e-9)
    }

    pub fn recording(&self) -> bool {
        self.recording
    }

    /// Demonstration time so far, including the open episode.
    pub fn demo_time(&self) -> f64 {
        self.dataset.total_demo_time + self.recorder.active_seconds()
    }

    pub fn frames(&self) -> usize {
        self.dataset.frame_count() + self.recorder.frame_count()
    }

    pub fn status(&self) -> ServerMessage {
        ServerMessage::Status {
            demo_time: self.demo_time(),
            episodes: self.dataset.episodes.len() + usize::from(self.recorder.frame_count() > 0),
            frames: self.frames(),
            recording: self.recording,
            seq: self.seq,
        }
    }

    pub fn frame(&self) -> Vec<u8> {
        encode_frame(&self.image, self.state.sim_time, self.recording)
    }

    /// Applies a client message. Returns whether the simulator advanced.
    pub fn handle(&mut self, msg: ClientMessage) -> Result<bool, TeleopError> {
        match msg {
            ClientMessage::Twist { v, seq } => {
                if v.iter().any(|c| !c.is_finite()) {
                    return Err(TeleopError::Connection("twist components must be finite".into()));
                }
                self.command = Twist::from_array(v, Frame::EndEffector)
                    .clamped(self.ctrl.max_linear_speed, self.ctrl.max_angular_speed);
                self.seq = seq;
                if self.cfg.clock == Clock::Lockstep {
                    self.tick()?;
                    return Ok(true);
                }
            }
            ClientMessage::Record { on } => self.recording = on,
            ClientMessage::Reset => {
                self.close_episode()?;
                let pose = sample_start(&self.world, &mut self.rng)?;
                self.state = SimState::new(pose);
                self.command = Twist::zero(Frame::EndEffector);
                self.image = self.world.observe(&self.state.ee_pose, &mut self.rng);
            }
            ClientMessage::EndSession => {}
        }
        Ok(false)
    }

    /// One control period: record the current view with the current
    /// command, then move.
    pub fn tick(&mut self) -> Result<(), TeleopError> {
        self.recorder.tick(self.recording, &self.image, &self.command);
        let (next, _) = apply_with_safety(&self.world, &self.state, self.command, self.ctrl.dt())?;
        self.state = next;
        self.steps += 1;
        self.image = self.world.observe(&self.state.ee_pose, &mut self.rng);
        Ok(())
    }

    fn close_episode(&mut self) -> Result<(), TeleopError> {
        let next = Recorder::new(
            self.ctrl.rate,
            self.record_rate,
            self.demo_time(),
            self.dataset.next_episode_id(),
            Source::Teleop,
        )?;
        let done = std::mem::replace(&mut self.recorder, next);
        match done.finish() {
            Ok((episode, secs)) => {
                self.dataset.push_episode(episode, secs)?;
                Ok(())
            }
            // recording never ran during this episode: nothing to keep
            Err(DatasetError::EmptyEpisode) => Ok(()),
            Err(e) => Err(e.into()),
        }
    }

    /// Closes the open episode and persists the dataset.
    pub fn finish(&mut self) -> Result<SessionSummary, TeleopError> {
        self.recording = false;
        self.close_episode()?;
        if let Some(dir) = &self.out {
            self.dataset.save(dir)?;
        }
        Ok(SessionSummary {
            episodes: self.dataset.episodes.len(),
            frames: self.dataset.frame_count(),
            demo_time: self.dataset.total_demo_time,
            steps: self.steps,
            saved_to: self.out.clone(),
        })
    }
}

fn sample_start(world: &World, rng: &mut ChaCha8Rng) -> Result<Pose, TeleopError> {
    let band = if rng.random_bool(0.5) { Band::Near } else { Band::Far };
    sample_initial_pose(rng, band, world).map_err(|e| TeleopError::Dataset(e.into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::world::looking_down;

    fn lockstep_session(out: Option<PathBuf>) -> TeleopSession {
        let world = World::default();
        let start = Pose::new(world.hover_point() + Vec3::new(0.05, 0.0, 0.15), looking_down());
        let cfg = TeleopConfig { clock: Clock::Lockstep, ..Default::default() };
        TeleopSession::new(world, ControlConfig::default(), cfg, 3.0, Some(start), out).unwrap()
    }

    fn twist(v: [f64; 6]) -> ClientMessage {
        ClientMessage::Twist { v, seq: 0 }
    }

    #[test]
    fn frame_codec_round_trip() {
        let img = Image::filled(3, 2, [0.2, 0.4, 0.6]);
        let bytes = encode_frame(&img, 1.25, true);
        assert_eq!(bytes.len(), 16 + 18);
        assert_eq!(&bytes[..4], b"SVCF");
        let f = decode_frame(&bytes).unwrap();
        assert_eq!((f.width, f.height, f.sim_time, f.recording), (3, 2, 1.25, true));
        assert_eq!(f.rgb, img.to_rgb8());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_frame(&bad).is_err());
        assert!(decode_frame(&bytes[..20]).is_err());
    }

    #[test]
    fn message_json_shapes() {
        let m: ClientMessage = serde_json::from_str(r#"{"type":"twist","v":[1,0,0,0,0,0],"seq":4}"#).unwrap();
        assert_eq!(m, ClientMessage::Twist { v: [1.0, 0.0, 0.0, 0.0, 0.0, 0.0], seq: 4 });
        let m: ClientMessage = serde_json::from_str(r#"{"type":"end_session"}"#).unwrap();
        assert_eq!(m, ClientMessage::EndSession);
        assert!(serde_json::from_str::<ClientMessage>(r#"{"type":"fly"}"#).is_err());
        let s = serde_json::to_value(ServerMessage::Status {
            demo_time: 1.0,
            episodes: 2,
            frames: 3,
            recording: true,
            seq: 9,
        })
        .unwrap();
        assert_eq!(s["type"], "status");
        assert_eq!(s["frames"], 3);
    }

    #[test]
    fn zero_twists_hold_the_pose() {
        let mut s = lockstep_session(None);
        let start = s.state.ee_pose;
        for _ in 0..60 {
            assert!(s.handle(twist([0.0; 6])).unwrap());
        }
        assert_eq!(s.state.ee_pose, start);
        assert!((s.state.sim_time - 2.0).abs() < 1e-9);
    }

    #[test]
    fn ten_seconds_of_recording() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = lockstep_session(Some(dir.path().to_path_buf()));
        s.handle(ClientMessage::Record { on: true }).unwrap();
        for _ in 0..300 {
            s.handle(twist([0.0, 0.0, 0.0, 0.0, 0.0, 0.1])).unwrap();
        }
        s.handle(ClientMessage::Record { on: false }).unwrap();
        for _ in 0..90 {
            s.handle(twist([0.0; 6])).unwrap();
        }
        let summary = s.finish().unwrap();
        assert!((summary.frames as i64 - 30).abs() <= 1);
        assert!((summary.demo_time - 10.0).abs() < 1e-9);
        let ds = DemoDataset::load(dir.path()).unwrap();
        assert_eq!(ds.frame_count(), summary.frames);
        assert!(ds.episodes.iter().all(|e| e.source == Source::Teleop));
    }

    #[test]
    fn safety_bounds_the_teacher() {
        let mut s = lockstep_session(None);
        // end-effector -Z points up while looking down
        for _ in 0..1800 {
            s.handle(twist([0.0, 0.0, -0.25, 0.0, 0.0, 0.0])).unwrap();
            assert!(s.world.workspace.distance_field(s.state.ee_pose.position) <= 0.3);
        }
        assert!(s.world.workspace.distance_field(s.state.ee_pose.position) > 0.0);
    }

    #[test]
    fn reset_closes_the_episode() {
        let mut s = lockstep_session(None);
        s.handle(ClientMessage::Record { on: true }).unwrap();
        for _ in 0..30 {
            s.handle(twist([0.0; 6])).unwrap();
        }
        s.handle(ClientMessage::Reset).unwrap();
        assert_eq!(s.dataset.episodes.len(), 1);
        for _ in 0..30 {
            s.handle(twist([0.0; 6])).unwrap();
        }
        let summary = s.finish().unwrap();
        assert_eq!(summary.episodes, 2);
        assert!((summary.demo_time - 2.0).abs() < 1e-9);
        let times: Vec<f64> = s.dataset.frames().map(|f| f.demo_time).collect();
        assert!(times.windows(2).all(|w| w[1] > w[0]));
    }
}
