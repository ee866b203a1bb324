#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::suspicious_arithmetic_impl)]

pub mod asymptotics;
pub mod cli;
pub mod error;
pub mod fields;
pub mod formal;
pub mod fourier;
pub mod geometry;
pub mod hitchin;
pub mod linalg;
pub mod quantization;
pub mod sphere;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
