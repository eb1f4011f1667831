//! Multivariate time-series forecasting with a selective state-space encoder
//! whose per-step hidden coefficient state is transformed by learned channel
//! mixing, order-wise polynomial reweighting, and an adaptive order-combining
//! gate — together with the Legendre/online-approximation substrate it is
//! built on, a training pipeline, and a small CLI.

pub mod cli;
pub mod data;
pub mod error;
pub mod hippo;
pub mod legendre;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod polyops;
pub mod sscan;

pub use error::{Error, Result};
