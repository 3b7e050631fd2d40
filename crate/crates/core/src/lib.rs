//! Simulation toolkit for cluster-based fast synchronization of distributed
//! workers.
//!
//! The pieces fit together like this: execution traces are grouped into a
//! fast and a slow cluster ([`clustering`]), per-cluster runtime
//! distributions are fitted as two-component Gaussian mixtures ([`stats`]),
//! a three-option sync-point schedule is derived from those models
//! ([`scheduler`]) with decision rules taken from a two-cluster
//! coordination game ([`game`]), and workers follow the schedule at runtime
//! through a late-notification protocol ([`protocol`]). The [`sim`] module
//! wires all of it into a discrete-event simulator with ASP/BSP/SSP/DSSP
//! baselines for comparison.

pub mod clustering;
pub mod game;
pub mod protocol;
pub mod scheduler;
pub mod sim;
pub mod stats;
