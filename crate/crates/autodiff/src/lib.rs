//! A small tape-based reverse-mode differentiation core.
//!
//! Every tensor on the tape is a row-major `rows x cols` matrix. Grouped
//! tensors (`G x K x D`) are stored as `(G * K) x D` with consecutive rows
//! belonging to the same group, and operations that reduce over groups take
//! the group size explicitly.
//!
//! The tape is rebuilt for every forward pass. Parameters live in a
//! [`ParamStore`] outside the tape; [`Tape::param`] copies a parameter onto
//! the tape and [`Gradients::param_grads`] pulls the parameter gradients back
//! out so that independent tapes can run on separate threads and be reduced
//! in a fixed order afterwards.

mod error;
pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod optim;
mod params;
mod real;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use params::{Init, ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
