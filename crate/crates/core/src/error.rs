use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("transition {from}->{to} is positive but absent from the target support")]
    SupportViolation { from: usize, to: usize },

    #[error("origin state {0} has no admissible destination")]
    EmptySupport(usize),

    #[error("normalization root-find failed for origin state {state} (|sum-1| = {residual:e})")]
    RootFind { state: usize, residual: f64 },

    #[error("invalid ensemble: {0}")]
    Ensemble(String),

    #[error("invalid grid model: {0}")]
    Model(String),

    #[error("network is not radial: {0}")]
    Radiality(RadialityError),

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error(
        "voltage limits infeasible at step {step}: bus {bus} misses its bound by {violation:e} (p.u.^2)"
    )]
    Infeasible {
        step: usize,
        bus: usize,
        violation: f64,
    },

    #[error("network step {step} did not converge (kkt {kkt_residual:e}, violation {max_violation:e})")]
    NetworkSolve {
        step: usize,
        kkt_residual: f64,
        max_violation: f64,
    },

    #[error("dual iteration diverged at iteration {iteration}: primal residual {primal_max:e}")]
    Diverged { iteration: usize, primal_max: f64 },

    #[error("no iterations have been run")]
    NoIterations,
}

/// Why a branch set fails to be a spanning tree.
#[derive(Debug, Clone, PartialEq)]
pub enum RadialityError {
    /// Bus ids along a closed loop, in traversal order.
    Cycle(Vec<usize>),
    /// A bus that cannot be reached from the slack.
    Disconnected(usize),
}

impl core::fmt::Display for RadialityError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            RadialityError::Cycle(buses) => {
                write!(f, "cycle through buses")?;
                for b in buses {
                    write!(f, " {b}")?;
                }
                Ok(())
            }
            RadialityError::Disconnected(bus) => write!(f, "bus {bus} is disconnected from the slack"),
        }
    }
}
