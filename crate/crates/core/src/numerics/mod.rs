//! Dense matrices, reverse-mode autodiff and the AdamW optimizer.

mod gradcheck;
pub mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use optim::{AdamWConfig, AdamWState};
pub use params::{ParamId, ParamSpec, ParameterStore};
pub(crate) use params::round_single;
pub use tape::{sigmoid, softplus, Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
