//! Convexification solver for the coefficient inverse problem of a two-dimensional
//! mean field games system: recover the interaction coefficient `k(x)` from
//! boundary traces and a single interior snapshot at `t = T/2`.

pub mod config;
pub mod error;
pub mod experiments;
pub mod forward;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod minimize;
pub mod model;
pub mod noise;
pub mod objective;
pub mod residuals;

pub use error::{Error, Result};
