//! Multi-machine power system simulation and moving-horizon state estimation.
//!
//! The crate couples ninth-order synchronous generator models (two-axis
//! machine with DC excitation and steam governor) to an algebraic network
//! model, simulates disturbance scenarios with an implicit trapezoidal DAE
//! integrator, synthesizes noisy PMU measurement streams, and reconstructs
//! generator internal states together with all nodal voltage phasors using an
//! equality-constrained Gauss-Newton moving-horizon estimator. A static
//! single-snapshot estimator and a largest-normalized-residual bad-data loop
//! are built from the same pieces.
//!
//! All electrical quantities are per unit on the system base `s_b` unless a
//! machine base is stated; angles are radians, times are seconds.

pub mod baddata;
pub mod error;
pub mod estimator;
pub mod genmodel;
pub mod kkt;
pub mod network;
pub mod powerflow;
pub mod simulator;

pub use error::{Error, Result};

/// Wraps an angle to the interval (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(std::f64::consts::TAU);
    if r > std::f64::consts::PI {
        r -= std::f64::consts::TAU;
    }
    r
}

#[cfg(test)]
pub(crate) mod fd;

#[cfg(test)]
pub(crate) mod testsys;
