//! Tiny transformer producing DAG parameters, its training loop and checkpoints.

pub mod checkpoint;
pub mod net;
pub mod tape;
pub mod tensor;
pub mod train;

pub use net::{TinyModel, TinyModelConfig};
pub use train::{Batch, LossKind, TrainConfig, TrainState};
