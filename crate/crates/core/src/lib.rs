//! Desk-scale toolkit for hypersphere-constrained training.

pub mod block;
pub mod checkpoint;
pub mod dedup;
pub mod ema;
pub mod error;
pub mod experiment;
pub mod manifold;
pub mod model;
pub mod mup;
pub mod numcore;
pub mod optim;
pub mod rope3d;
pub mod task;
pub mod train;

pub use error::{Error, Result};
