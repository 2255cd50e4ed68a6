//! Discrete-event simulator of a dynamic peer-to-peer ridesharing system.
//!
//! Drivers and passengers arrive over time, go online, and are matched in
//! batch every matching window by a service provider that minimizes total
//! vehicle kilometers traveled. Agents accept or reject matching options,
//! cancel before or after being matched, and may silently no-show. The
//! engine is a single-threaded event loop; parallelism exists across
//! independent replications and inside candidate generation (behind the
//! `parallel` feature, with a sequential fallback).

pub mod behavior;
pub mod domain;
pub mod engine;
pub mod log;
pub mod matching;
pub mod metrics;
pub mod network;
pub mod par;
pub mod rng;
pub mod scenario;
pub mod scheduling;

pub use domain::AgentId;
pub use network::NodeId;
