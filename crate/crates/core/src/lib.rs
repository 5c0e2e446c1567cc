//! Behavior cloning for eye-in-hand visual servoing.
//!
//! A camera on a robot end effector must reach a hover pose above a cup.
//! The crate provides the simulator and renderer, a scripted teacher, a
//! time-indexed demonstration dataset, a residual CNN trained by
//! regression on twists, a workspace safety layer that is summed with the
//! network command, and the harness that measures success rate against
//! demonstration time.

pub mod config;
pub mod control;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod expert;
pub mod geometry;
pub mod neural;
pub mod sim;
pub mod teleop;
pub mod workspace;
pub mod world;

pub use error::{
    ConfigError, ControlError, DatasetError, EvalError, GeometryError, NeuralError, SafetyError, SimError, TeleopError,
};
