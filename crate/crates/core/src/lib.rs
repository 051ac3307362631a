//! Hyperbolic-to-hyperbolic graph convolutional networks on the Lorentz
//! model, with Stiefel-constrained layer matrices and a small reverse-mode
//! autodiff engine.

// `!(x > 0.0)` is used on purpose so that NaN takes the error path.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod geometry;
pub mod graphdata;
pub mod model;
pub mod optimizer;
pub mod runner;
