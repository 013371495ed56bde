//! Deterministic reverse-mode differentiable array engine.
//!
//! Values are `f64` throughout. A [`Tape`] records one forward computation;
//! parameters live in a [`ParamStore`] and are bound onto a fresh tape per
//! step, so a trained model is an immutable value that can be shared.

mod gemm;
pub mod gradcheck;
pub mod init;
pub mod layers;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, ParamCheck};
pub use init::SeededRng;
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Axis, Tape, Var};
pub use tensor::Tensor;
