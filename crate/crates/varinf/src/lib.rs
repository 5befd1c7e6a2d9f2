//! Stochastic epidemic engine for multi-patch, multi-group SIR models with
//! random infection-age-dependent infectivity.
//!
//! The crate provides:
//! - exact event-driven agent-based simulation of the finite-N model ([`abm`]),
//! - the deterministic large-population limit, a system of Volterra integral
//!   equations ([`limit`]),
//! - a Feynman-Kac backward-equation representation of the susceptible
//!   fraction with Monte Carlo cross-checks ([`feynman_kac`]),
//! - the McKean-Vlasov fixed-point characterization of the limit and a
//!   pathwise coupling of the finite system to i.i.d. limit particles
//!   ([`mckv`]),
//! - a verification harness for error metrics and convergence studies
//!   ([`harness`]).
//!
//! See the `examples/` directory for runnable entry points covering each
//! capability, and the `varinf` binary for the batch CLI.

// The numeric kernels index several parallel arrays by cell/patch/time, where
// iterator-zip rewrites obscure the index algebra rather than clarify it.
#![allow(clippy::needless_range_loop)]
// Validation deliberately writes `!(x > 0.0)` so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod abm;
pub mod cli;
pub mod config;
pub mod error;
pub mod feynman_kac;
pub mod grid;
pub mod harness;
pub mod infectivity;
pub mod limit;
pub mod matrix;
pub mod mckv;
pub mod mobility;
pub mod rng;

pub use error::{Error, Result};
