//! Dense layers, hand-written reverse mode and gradient descent.

pub mod gradcheck;
mod mlp;
mod optim;

pub use mlp::{Activation, Dense, Mlp, MlpTape};
pub use optim::{sgd_step, StepDecay};
