//! Lyapunov-constrained multi-timescale hierarchical reinforcement learning
//! for controlled stochastic differential equations.

pub mod numerics;
pub mod dynamics;
pub mod environments;
pub mod neural;
pub mod lyapunov;
pub mod replay;
pub mod metrics;
pub mod agents;
