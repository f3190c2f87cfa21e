//! Multi-agent trust-region policy optimization lab.
//!
//! The crate holds the full-pipeline update scheme, its sequential and
//! simultaneous baselines, the networks and environments they train on, and
//! an exact tabular oracle for the theory behind them.

pub mod envs;
pub mod experiment;
pub mod nn;
pub mod oracle;
pub mod policies;
pub mod rollout;
pub mod updaters;
