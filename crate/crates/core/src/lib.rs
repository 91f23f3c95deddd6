//! Lifted dynamics models for nonlinear systems.
//!
//! Three model kinds share one lifting network and differ in how the lifted
//! state evolves:
//!
//! * **Traditional**: linear lifted dynamics `x̄′ = A x̄ + B c`.
//! * **Convex**: an input-convex network `x̄′ = g(x̄, c)`.
//! * **Extended**: `x̄′ = g(x̄, h_x̄(c))` where `h_x̄` is a learned,
//!   approximately invertible control transform conditioned on the lifted state.
//!
//! Everything numeric is generic over [`Scalar`]; training uses `f32` and the
//! gradient oracles use `f64`. The aliases at the crate root name the common
//! concrete instantiations.

// `!(x > 0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod error;
pub mod evalkit;
pub mod models;
pub mod netblocks;
pub mod rng;
pub mod scalar;
pub mod simwell;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub use models::{Model, ModelConfig, ModelKind};
pub use simwell::TrajectoryDataset;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type ParamStore32 = autodiff::ParamStore<f32>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type Tape32<'p> = autodiff::Tape<'p, f32>;
pub type Tape64<'p> = autodiff::Tape<'p, f64>;
