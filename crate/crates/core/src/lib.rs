//! Network-constrained optimal control of thermostatically controlled load
//! ensembles.
//!
//! Each bus-located ensemble is a Markov process whose transition matrices are
//! optimized against energy prices and a KL discomfort penalty. The ensembles
//! are coupled to a radial distribution feeder (LinDistFlow) through Lagrange
//! multipliers on their active and reactive injections, and the coupled
//! problem is solved by spatio-temporal dual decomposition in two flavours:
//! plain dual ascent ([`Variant::Std2`]) and the hybrid scheme that reads the
//! multipliers off pinned network solves ([`Variant::Hybrid`]).
//!
//! The crate is `no_std` (it needs `alloc`); file formats, the CLI and thread
//! pools live in the `tcl-dispatch` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod coordinator;
pub mod dispatch;
pub mod error;
pub mod exec;
pub mod flow;
pub mod grid;
pub mod mdp;
pub mod qp;
pub mod scenario;
pub mod stats;

pub use coordinator::{
    primal_residuals, residuals, Coordinator, DualState, IterationRecord, Residuals, Solution,
    Variant,
};
pub use dispatch::{DispatchContext, PinnedOutcome, StepDispatch};
pub use error::{Error, Result};
pub use exec::{Clock, Executor, NoClock, Sequential};
pub use flow::{losses, tree_flows, voltages, Flow};
pub use grid::{validate_radial, Branch, Bus, GridModel, TreeOrder};
pub use mdp::{
    backward_step_row, effective_utility, kl_stage_cost, propagate, solve_mdp, EffectiveCost,
    EnsembleSpec, MdpTrajectory,
};
pub use scenario::{AlgorithmOptions, ControlBounds, ScenarioSpec, StepSchedule, StepScaling};
pub use stats::{aggregate_moments, ks_distance_normal, sample_aggregate, AggregateMoments};
