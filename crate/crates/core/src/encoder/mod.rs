//! Dual-channel masked trajectory encoder in double precision with
//! hand-written backpropagation.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod grad;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rope;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{EncoderConfig, LossWeights};
pub use grad::{batch_loss, batch_loss_and_grad, LossBreakdown};
pub use model::{forward, EncoderInput, Example, ForwardOutput};
pub use params::Params;
