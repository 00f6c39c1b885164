//! Fairness-regularized CP tensor decomposition.
//!
//! A CP model `[[A, B, C]]` (or the matrix model `A B^T`) is fitted by block
//! coordinate descent while a penalty discourages statistical dependence
//! between the rows of the sensitive factor `A` and a sensitive matrix `S`.
//! Penalties: the RBF kernel independence criterion (KHSIC), linear HSIC,
//! and the FATR orthogonality term. Fitted factors are audited with a
//! neural probe that tries to recover the sensitive label from `A`.

pub mod audit;
pub mod bcd;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod io;
pub mod kernel;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{FactorModel, Mat, Mode, Observed, Tensor3};
