//! A small feed-forward neural-network engine.
//!
//! Supports dense and valid 2D-convolution layers, ReLU / softmax / linear
//! activations, multi-head softmax branches, MSE and sparse categorical
//! cross-entropy losses, Adam with an L2 penalty, layerwise magnitude pruning
//! on a polynomial-decay schedule, and an exact inference FLOP accountant.
//!
//! Batches are row-major `(batch, features)` matrices. Convolution inputs are
//! flattened row-major over `(rows, cols)`; convolution outputs are flattened
//! channels-last over `(out_rows, out_cols, filters)`.

mod error;
pub mod flops;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod network;
pub mod optim;
pub mod prune;
mod scalar;
pub mod spec;
pub mod train;

pub use error::NnError;
pub use flops::{flop_count, flop_report, FlopReport, FlopTally, LayerFlops};
pub use loss::{mse_loss, scce_loss, Targets};
pub use network::{Gradients, Network, ParamBlock, Trace};
pub use optim::{Adam, AdamConfig};
pub use prune::{apply_pruning, layer_sparsities, sparsity_at_epoch};
pub use scalar::Scalar;
pub use spec::{Activation, FlopScope, LayerSpec, Loss, NetworkSpec};
pub use train::{train, EpochRecord, TrainConfig, TrainData, TrainObserver, TrainerState};

pub type Result<T> = std::result::Result<T, NnError>;
