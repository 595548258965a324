//! Joint optimization of non-Cartesian k-space sampling trajectories and an
//! unrolled model-based reconstruction.

pub mod cli;
pub mod error;
pub mod eval;
pub mod fft;
pub mod grad;
pub mod io;
pub mod linalg;
pub mod mrisys;
pub mod nufft;
pub mod recon;
pub mod train;
pub mod trajectory;

#[cfg(test)]
pub(crate) mod test_util;

pub use error::{Error, Result};
