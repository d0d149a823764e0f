//! Dense multi-head networks, losses and optimizers.

mod loss;
mod matrix;
mod model;
mod optim;

pub use loss::{loss_and_grad, loss_value, metric, LossKind, MetricKind, Orientation, TaskSpec};
pub use matrix::Matrix;
pub use model::{Activation, Architecture, Capacity, LayerLayout, Model, MultiTape, Tape};
pub use optim::{lr_at, Optimizer, OptimizerConfig, OptimizerKind, OptimizerState, Schedule};
