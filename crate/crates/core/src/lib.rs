//! Kernel-based regularized iterative learning control.

pub mod baselines;
pub mod campaign;
pub mod cli;
pub mod config;
pub mod controller;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod model_estimation;
pub mod noise;
pub mod optim;
pub mod persist;
pub mod plant;
pub mod regression;
pub mod runner;
pub mod store;
pub mod sysgen;

pub use error::{KrilcError, Result};
