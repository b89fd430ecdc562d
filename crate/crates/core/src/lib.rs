//! Sparse symmetric low-rank regression of a scalar response on symmetric
//! matrix covariates (for example functional connectivity matrices), with
//! standard and symmetrized CP regression baselines, synthetic data
//! generators and a cross-validation / replication harness.

pub mod cli;
pub mod error;
pub mod evaluate;
pub mod glm;
pub mod io;
pub mod simulate;
pub mod solvers;
pub mod tensor;

pub use error::{Error, Result};
pub use glm::Family;

pub use solvers::{CpFactors, Dataset, FitConfig, FitResult, SymCpFactors};
pub use tensor::{DenseMatrix, SymmetricMatrix};
