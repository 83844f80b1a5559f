//! Tensor operations, the classifier network, its optimizer and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod network;
pub mod ops;
mod tensor;

pub use adam::{AdamHyper, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use network::{InputBatch, Network, NetworkConfig, ParamId, ParamSet};
pub use ops::Mode;
pub use tensor::Tensor;
