//! Paired music/emotion sequence encoders trained under a composite loss
//! (canonical correlation + KL-divergence ranking over diagonal Gaussian
//! embeddings), with bidirectional cross-modal retrieval evaluation.

pub mod baselines;
pub mod cli;
pub mod data;
pub mod encoders;
pub mod error;
pub mod io;
pub mod losses;
pub mod numerics;
pub mod report;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
