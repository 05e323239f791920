//! Solver laboratory for impulse-control problems with local and non-local
//! drivers: value functions are computed by regression Monte Carlo on
//! simulated paths (reflected backward recursions with an intervention
//! obstacle) and cross-validated against an independent finite-difference
//! solver on the same problem description.

pub mod cli;
pub mod expr;
pub mod fdoracle;
pub mod fixedpoint;
pub mod impulse;
pub mod model;
pub mod rbsde;
pub mod rng;
pub mod sde;
