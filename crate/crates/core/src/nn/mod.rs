//! Minimal reverse-mode differentiation, MLPs and Adam-family optimizers.

pub mod checkpoint;
pub mod mlp;
pub mod optim;
pub mod tape;

pub use checkpoint::Checkpoint;
pub use mlp::{Linear, MlpParams, MlpVars};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use tape::{Gradients, Tape, Var};
