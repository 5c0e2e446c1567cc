use std::path::PathBuf;

use thiserror::Error;

use crate::geometry::Frame;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("frame mismatch: got {left:?}, expected {right:?}")]
    FrameMismatch { left: Frame, right: Frame },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SafetyError {
    #[error("invalid workspace volume: {0}")]
    InvalidVolume(String),
    #[error("invalid safety config: {0}")]
    InvalidConfig(String),
    #[error("distance gradient vanishes at ({x}, {y}, {z}); no unique direction back inside")]
    TieBreak { x: f64, y: f64, z: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scene or camera: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("episode captured no frames")]
    EmptyEpisode,
    #[error("no frames within the first {minutes} minutes of demonstration")]
    EmptySplit { minutes: f64 },
    #[error("invalid recording parameter: {0}")]
    InvalidArgument(String),
    #[error("unsupported dataset format in {path}: {reason}")]
    Version { path: PathBuf, reason: String },
    #[error("truncated dataset file {path}: expected {expected} bytes, found {found}")]
    Truncated { path: PathBuf, expected: u64, found: u64 },
    #[error("image dimension mismatch: {0}")]
    Dimension(String),
    #[error("corrupt dataset manifest: {0}")]
    Corrupt(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Safety(#[from] SafetyError),
}

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Divergence { epoch: usize, batch: usize },
    #[error("checkpoint error in {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("emergency stop at t={sim_time:.3}s: non-finite command twist")]
    EmergencyStop { sim_time: f64 },
    #[error("invalid control config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Safety(#[from] SafetyError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid ablation config: {0}")]
    Config(String),
    #[error("dataset covers {available_minutes:.2} minutes of demonstration, checkpoints need {required_minutes}")]
    InsufficientData { available_minutes: f64, required_minutes: f64 },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Control(#[from] ControlError),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum TeleopError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("connection error: {0}")]
    Connection(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Control(#[from] ControlError),
}
