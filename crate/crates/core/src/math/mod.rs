//! Dense numerics: matrices, layers, losses and the optimizer.

pub mod gradcheck;
pub mod layer;
pub mod loss;
mod matrix;
pub mod network;
pub mod optim;

pub use layer::{Activation, BatchNorm, Dense, Layer, Mode};
pub use loss::LossKind;
pub use matrix::Matrix;
pub use network::{Gradients, Network};
pub use optim::{OptimConfig, SgdMomentum};
