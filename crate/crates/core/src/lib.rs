//! Optimal and learned dispatch of a grid-connected storage device.
//!
//! The crate models a small microgrid (load, PV, storage, generator) and
//! solves the daily dispatch problem three ways:
//!
//! * [`solver_sp`]: shortest path over the cumulative-generation lattice
//!   (ideal storage),
//! * [`solver_pmp`]: minimum-principle shooting on the initial costate
//!   (lossy storage),
//! * [`solver_dp`]: forward dynamic programming over a state-of-charge grid
//!   (lossy storage with quadratic transmission loss).
//!
//! [`rl_env`] exposes the same problem as an MDP and [`rl_agent`] trains a
//! tabular Q-learning policy on it. [`harness`] compares policies with the
//! classical optima.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod grid_model;
pub mod harness;
pub mod profiles;
pub mod rl_agent;
pub mod rl_env;
pub mod solver_dp;
pub mod solver_pmp;
pub mod solver_sp;

pub use error::{DispatchError, Result};
pub use grid_model::{CostModel, DispatchTrajectory, StorageSpec, TransmissionSpec};
pub use profiles::{Dataset, EpisodeProfile, Partition};
