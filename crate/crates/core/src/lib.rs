//! Linear spatial-temporal attention super-resolution with pose-guided
//! training, built on a small reverse-mode tensor library.

pub mod affm;
pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod cnn;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod patch;
pub mod pose;
pub mod scalar;
pub mod selftest;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod tnsr;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;
pub use tape::{ParamId, Tape, Var};
pub use tensor::Tensor;
