//! Minimal tensor engine with layer-wise reverse-mode differentiation, the
//! residual policy network, and its training loop.

pub mod checkpoint;
pub mod gradcheck;
pub mod net;
pub mod tensor;
pub mod train;

pub use net::{input_from_rgb8, ForwardCache, PolicyNet};
pub use tensor::{Scalar, Tensor};
pub use train::{
    batch_gradients, batch_loss, train, train_with_progress, twist_loss, OptimizerKind, Sample, TrainConfig,
    TrainReport, DEFAULT_TWIST_SCALES,
};
