//! Dense `f64` matrices, forward kernels, a reverse-mode tape, AdamW and
//! finite-difference gradient checking.

pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{AdamW, OptimConfig, TrainConfig};
pub use params::ParamStore;
pub use tape::{Bound, Grads, Mask, Tape, Var};
pub use tensor::Tensor2;
