//! Local Lyapunov functions for finite-state nonlinear Markov processes.
//!
//! The forward equation `dp/dt = p Γ(p)` lives on the probability simplex.
//! This crate provides the rate-family catalog, an ODE integrator and
//! fixed-point search, Lyapunov candidates and their checks, the
//! large-deviation Hamiltonian and Lagrangian, and the exact finite-N
//! empirical-measure chain with a Gillespie simulator.
//!
//! The crate is `no_std` and needs only `alloc`.

#![no_std]

extern crate alloc;

pub mod dynamics;
pub mod error;
pub mod expr;
pub mod finite_n;
pub mod hamiltonian;
pub mod linalg;
pub mod lyapunov;
pub mod models;
pub mod quadrature;
pub mod simplex;

pub use error::{Error, Result};
pub use models::{ModelSpec, RateFamily, RateMatrix};
pub use simplex::{SimplexGrid, SimplexPoint, TangentVector};
