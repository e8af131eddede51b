//! Dense arrays, reverse-mode autodiff, parameters, random streams and the
//! checkpoint container.

pub mod checkpoint;
pub mod gradcheck;
mod mask;
pub mod ops;
mod params;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use mask::BinaryMask;
pub use params::{init_normal, init_projection, Gradients, ParamId, ParamSet, Parameter};
pub use rng::RngStream;
pub use tape::{AttnDropout, Tape, Var};
pub use tensor::{matmul, DenseArray, Real, Tensor};
