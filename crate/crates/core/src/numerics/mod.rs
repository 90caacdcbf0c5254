//! f64 tensor core: storage, matrix kernels, differentiable operations, and
//! the finite-difference gradient checker that every operation is verified
//! against.

pub mod gradcheck;
pub mod ops;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_coords, GradCheckReport};
pub use tensor::Tensor;
