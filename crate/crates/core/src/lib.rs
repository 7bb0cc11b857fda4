//! Simulation and statistical verification of spontaneous collapse models.
//!
//! * [`grid`]: wavefunctions on a uniform grid, split-step Schrödinger
//!   propagation, and the exact Gaussian collapse multiplications.
//! * [`grw`]: the GRW jump process.
//! * [`diosi`]: the linear Diósi equation under the reference measure, the
//!   GRW-coupled hybrid process, and norm-squared reweighting.
//! * [`master`]: Lindblad density-matrix evolution for both models.
//! * [`verify`]: seeded Monte Carlo checks producing [`verify::TestReport`]s.
//! * [`suite`]: the numbered acceptance criteria built from those checks.
//! * [`io`]: run configuration, trajectory archives and CSV output.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diosi;
pub mod error;
pub mod grid;
pub mod grw;
pub mod io;
pub mod master;
pub mod rng;
pub mod stats;
pub mod suite;
pub mod trajectory;
pub mod verify;

pub use error::{CollapseError, Result};
pub use grid::{
    collapse_flow, gaussian_hit, make_gaussian_packet, schrodinger_step, CollapseSpec, Grid,
    HamiltonianSpec, Propagator, StateLabel, WaveFunction,
};
pub use grw::{flash_density, grw_trajectory, sample_flash_center, sample_jump_times, GrwParams};
pub use rng::{StreamKey, StreamRole, WienerPath};
pub use trajectory::{FlashEvent, ModelKind, Snapshot, TrajectoryRecord};
