//! Numerical laboratory for the integral-kernel reading of masked-autoencoder
//! attention.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`]: pixel grids, the graph BV seminorm and non-overlapping patch
//!   decomposition.
//! * [`lowrank`]: truncated SVD, block-sampled rank-`r` reconstruction and the
//!   Monte Carlo harness around it.
//! * [`attention`]: token matrices, positional embeddings and the single-head
//!   attention block.
//! * [`kernel`]: attention as a discrete integral kernel, with normalisation,
//!   Mercer spectra and decay fits.
//! * [`stability`]: layer-wise drift of pure-kernel propagation.
//! * [`fredholm`]: first/second kind equations and the Tikhonov functional.
//! * [`geometry`]: the default ViT/MAE shapes and a self-test.
//! * [`io`]: image and matrix file formats.
//! * [`interpolation`]: shared mask-token absorption and masked-patch
//!   interpolation weights.
//! * [`experiment`]: JSON-configured runs that write CSV/JSON artifacts.

pub mod attention;
pub mod error;
pub mod experiment;
pub mod fredholm;
pub mod geometry;
pub mod grid;
pub mod interpolation;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod lowrank;
pub mod parallel;
pub mod rng;
pub mod stability;
pub mod synth;

pub use error::{Error, Result};
