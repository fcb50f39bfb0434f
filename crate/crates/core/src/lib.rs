//! Generalized Nash equilibrium seeking with extremum seeking control.
//!
//! Full-information and zero-order primal-dual flows, a per-agent parameter
//! estimator, nonlinear plant scenarios, a fixed-step integration harness
//! and an independent equilibrium oracle.

pub mod cli;
pub mod controller;
pub mod error;
pub mod estimator;
pub mod flow;
pub mod game;
pub mod harness;
pub mod oracle;
pub mod plant;
pub mod scenario;
pub mod sets;

pub use error::{Error, Result};
