//! Exact Gaussian-process regression on tiled dense linear algebra, executed
//! as asynchronous dataflow task graphs.
//!
//! * [`tiled_matrix`]: tile layout for symmetric matrices, panels and vectors
//! * [`kernels`]: squared exponential kernel and tile assembly
//! * [`tile_blas`]: sequential per-tile kernels with a swappable backend
//! * [`task_runtime`]: futures, dataflow and the work-stealing pool
//! * [`gp`]: Cholesky, solves, prediction, loss, gradient and Adam
//! * [`simulator`]: mass-spring-damper data generation and dataset files
//! * [`harness`]: benchmark records, statistics and plot data

pub mod error;
pub mod gp;
pub mod harness;
pub mod kernels;
pub mod simulator;
pub mod task_runtime;
pub mod tile_blas;
pub mod tiled_matrix;

pub use error::{Error, Result};
pub use kernels::{Dataset, Hyperparameters};
pub use tile_blas::BackendId;
