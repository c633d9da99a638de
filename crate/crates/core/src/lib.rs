//! Survival of absorbed diffusions started from a Poisson random measure.
//!
//! The crate computes the probability `u(t, x)` that a constant-coefficient
//! diffusion started at `x` has not hit the boundary of a domain by time `t`,
//! both from the Dirichlet eigenfunction series ([`spectral`]) and by path
//! simulation ([`stochastic`]). On top of that, [`experiment`] checks that the
//! number of surviving particles from a Poisson initial configuration with
//! intensity `nu / g(tau)` follows a Poisson law with parameter
//! `a = int F dnu`.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod domain;
pub mod experiment;
pub mod pointprocess;
pub mod quadrature;
pub mod rng;
pub mod specfun;
pub mod spectral;
pub mod stochastic;

pub use domain::{DomainKind, DomainSpec};
pub use rng::RngSeed;
