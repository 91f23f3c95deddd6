//! Dense-layer reverse-mode differentiation and optimization.

mod adam;
mod params;
mod tape;

pub use adam::{clip_grad_norm, project_constrained, project_nonnegative, AdamConfig, AdamState};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{activate, relu, softplus, Activation, Gradients, Tape, Var};
