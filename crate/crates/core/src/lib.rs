//! Hierarchical off-diagonal butterfly (HOD-BF) machinery for volumetric
//! scattering kernels: cluster trees, interpolative and butterfly compression,
//! randomized butterfly reconstruction, SMW-based inversion, a HOD-LR
//! baseline, and a TFQMR solver with the compressed inverse as preconditioner.

extern crate blas_src;

pub mod butterfly;
pub mod cluster;
pub mod error;
pub mod fit;
pub mod geometry;
pub mod hodbf;
pub mod hodlr;
pub mod kernels;
pub mod krylov;
pub mod lowrank;
pub mod oracle;
pub mod randomized;
pub mod serialize;
pub mod types;

pub use error::{Error, Result};
pub use types::{CMat, CVec, C64};
