//! Cell-free multi-user MIMO precoding: an association-aware, permutation
//! equivariant GNN trained without labels, plus WMMSE and MRT baselines.

pub mod aagnn;
pub mod autodiff;
pub mod baselines;
pub mod dataset;
pub mod equivariance;
pub mod error;
pub mod io;
pub mod objective;
pub mod scenario;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
