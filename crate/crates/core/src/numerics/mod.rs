//! Tensor core: values, seeded randomness, linear algebra and a reverse-mode tape.
//!
//! Everything is `f64`. Functions are pure given their inputs and an explicit
//! [`RandomState`], so distinct data can be processed from several threads.

pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod ops;
pub mod rng;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, MarginConvention, Var};
pub use linalg::{
    centered_covariance, cross_covariance, inv_sqrt_psd, singular_value_sum, sym_eig,
    sym_eig_backward, SymEig,
};
pub use ops::{affine, concat, dropout, mean_over_time, softplus};
pub use rng::{RandomState, RNG_ALGORITHM};
pub use tensor::Tensor;
