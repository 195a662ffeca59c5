//! Dense tensors, reverse-mode autodiff, Adam, the learning-rate schedule and
//! seeded randomness.

mod gradcheck;
mod graph;
pub mod init;
pub(crate) mod kernels;
mod optim;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many};
pub use graph::{AttnMask, Graph, SeqLayout, Var};
pub use optim::{adam_step, schedule_rate, LrSchedule, OptimizerState};
pub use params::{Bound, ParamSet};
pub use rng::Rng;
pub use tensor::Tensor;
