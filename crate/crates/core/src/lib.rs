//! Neural covariance SDEs for shaped Transformers.
//!
//! The crate tracks the token covariance `V = X Xᵀ / n` of residual networks at
//! initialization, in two ways:
//!
//! * finite-width forward simulation of shaped attention, shaped-ReLU MLP and
//!   Transformer blocks ([`finitenet`]);
//! * Euler–Maruyama integration of the limiting covariance SDE
//!   `dV = b(V) dt + Σ(V)^{1/2} dB` in depth-to-width time ([`sdesim`]), with
//!   closed-form drift and diffusion from [`coeffs`].
//!
//! [`mcoracle`] holds brute-force Monte Carlo estimators for every closed-form
//! moment, and [`stats`] summarizes ensembles (KDE, percentiles, KS distance).
//!
//! Covariances are flattened row-major over the upper triangle, see
//! [`symmat::FlatIndexMap`].

// `!(x > 0.0)` also rejects NaN, which is the point of every such check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coeffs;
pub mod ensemble;
pub mod error;
pub mod finitenet;
pub mod mcoracle;
pub mod sdesim;
pub mod stats;
pub mod symmat;

pub use error::{Error, Result};
pub use symmat::{FlatIndexMap, TokenCovariance};
