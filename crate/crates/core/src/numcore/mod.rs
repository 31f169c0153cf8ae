//! Dense linear algebra, reproducible random streams, the DMAT file format
//! and the finite-difference gradient oracle used throughout the tests.

pub mod dmat;
mod gradcheck;
mod matrix;
mod rng;

pub use gradcheck::{finite_diff_grad, relative_error, DEFAULT_EPS};
pub use matrix::{dot, matmul, matmul_nt, matmul_tn, norm, rms, rms_slice, Matrix};
pub use rng::RngStream;
