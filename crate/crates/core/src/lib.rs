//! Federated matrix completion.
//!
//! The crate implements FedMC-ADMM, a randomized block-coordinate ADMM in
//! which every sampled client runs `N` proximal gradient steps on its user
//! factor `U_i`, `N` linearized steps on its copy `W_i` of the shared item
//! factor, and a dual ascent step against the broadcast `V`, after which the
//! server solves a closed-form proximal problem for the new `V`. The FedMAvg
//! model-averaging baseline, the metrics used to compare them, and a
//! reproducible simulation driver live alongside.
//!
//! Module map:
//!
//! * [`data`]: masked sparse matrices, rating-file ingestion, train/test
//!   splitting and client partitioning.
//! * [`kernels`]: masked gradients, proximal operators, Lipschitz rules and
//!   power iteration.
//! * [`admm`]: the FedMC-ADMM engine.
//! * [`fedmavg`]: the FedMAvg baseline.
//! * [`diagnostics`]: objective, RMSE, augmented Lagrangian, stationarity
//!   residual and the descent surrogate.
//! * [`harness`]: configuration, synthetic data, CSV metrics, checkpoints and
//!   the end-to-end run driver behind the `fedmc` binary.

pub mod admm;
pub mod data;
pub mod diagnostics;
mod error;
pub mod exec;
pub mod fedmavg;
pub mod harness;
pub mod kernels;

pub use error::{Error, Result};

/// Dense factor matrix type used throughout the crate.
pub type Matrix = ndarray::Array2<f64>;
