//! Linear two-timescale stochastic approximation with sparse projections.
//!
//! * [`sa`]: the generic iteration, fixed point and projection schedule.
//! * [`noise`]: pluggable noise models driven by counter-based generators.
//! * [`gtd`]: GTD(0), GTD2 and TDC over finite MDPs with linear features.
//! * [`ledger`]: the explicit finite-time constants and thresholds.
//! * [`analysis`]: decomposition identities, rate fits, coupling and
//!   lower-bound Monte Carlo.

pub mod analysis;
pub mod error;
pub mod gtd;
pub mod ledger;
pub mod linalg;
pub mod noise;
pub mod sa;

pub use error::{Error, Result};
pub use noise::{validate_noise_bound, NoiseModel, NoiseRecord, SphereNoise, ZeroNoise};
pub use sa::{
    check_assumptions, derive_system, is_projection_index, run_trajectory, run_with_system, sa_step,
    sparse_project, stepsizes, AssumptionReport, DerivedSystem, IterateState, MatrixSpec, ProjectionConfig,
    RunOptions, StepSchedule, Trajectory,
};
