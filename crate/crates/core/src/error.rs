//! Crate-wide error type.

/// Errors raised by model construction, simulation and estimation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A physical parameter violates its admissibility condition.
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    /// The network description is inconsistent (bad endpoints, overlapping
    /// node sets, duplicate branches, non-positive base power).
    #[error("invalid network model: {0}")]
    InvalidModel(String),

    /// A caller-supplied input does not match the model (dimension mismatch,
    /// unknown node or branch, misaligned time series, gaps in a window).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Newton power flow failed to reach the mismatch tolerance.
    #[error("power flow did not converge after {iterations} iterations (mismatch {mismatch:.3e})")]
    PowerFlowDiverged { iterations: usize, mismatch: f64 },

    /// The implicit integrator corrector failed at some step.
    #[error("integration step {step} (t = {t:.6} s): corrector did not converge (residual {residual:.3e})")]
    CorrectorDiverged { step: usize, t: f64, residual: f64 },

    /// The steady-state back-solve for a generator has no solution.
    #[error("generator equilibrium back-solve failed: {0}")]
    SingularInit(String),

    /// The Gauss-Newton KKT system is singular or numerically rank deficient.
    #[error("singular KKT system (condition estimate {cond:.3e})")]
    SingularKkt { cond: f64 },

    /// The measurement/constraint set does not determine the network state.
    #[error("state not observable from the given measurements and constraints (condition estimate {cond:.3e})")]
    Unobservable { cond: f64 },

    /// Bad-data removal stripped so many channels that the problem became
    /// unobservable; lists the channels removed before the failure.
    #[error("bad-data removal made the problem unobservable (removed: {removed:?})")]
    RemovalUnobservable { removed: Vec<String> },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
