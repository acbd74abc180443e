//! Safe augmented random search for emergency load shedding.
//!
//! The crate bundles a surrogate grid model with delayed voltage recovery
//! ([`gridsim`]), barrier-shaped rewards ([`reward`]), linear and LSTM
//! policies ([`policy`]), a deterministic rollout pool ([`parallel`]) and the
//! training loop ([`ars`]).

pub mod ars;
pub mod error;
pub mod gridsim;
pub mod parallel;
pub mod policy;
pub mod reward;

pub use ars::{
    train, ArsConfig, DirectionResult, GridObjective, IterationRecord, Objective, TrainFailure, TrainHistory,
    TrainObserver, TrainOutcome,
};
pub use error::{Error, LoadError, Result};
pub use gridsim::{ActionBounds, BusId, GridModel, SafetyEnvelope, StepInfo, Task};
pub use parallel::{JobPool, RolloutResult};
pub use policy::{PolicyArch, PolicyParams, RunningStats};
pub use reward::{RewardBreakdown, RewardWeights};
