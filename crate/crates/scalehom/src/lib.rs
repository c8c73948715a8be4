//! Numerical laboratory for scale-by-scale homogenization of diffusion in a
//! divergence-free Gaussian drift and its reduction to geometric Brownian
//! motion on SL(n).

pub mod aniso;
pub mod error;
pub mod fft;
pub mod harness;
pub mod homogenize;
pub mod particle;
pub mod quadrature;
pub mod rng;
pub mod scalar_n2;
pub mod scale_ladder;
pub mod sl_brownian;
pub mod sl_flow;
pub mod spectral_field;
pub mod stats;

pub use error::{Error, Result};
