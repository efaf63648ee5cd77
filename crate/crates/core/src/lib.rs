//! Simulator for decentralized stochastic bilevel optimization.
//!
//! `n` agents each hold a local upper objective `f_i(x, y)` and a strongly
//! convex lower objective `g_i(x, y)`, and cooperate over a communication
//! graph to minimize `Φ(x) = (1/n) Σ f_i(x, y*(x))`. Every level of the
//! single-loop iteration can use its own heterogeneity-correction strategy
//! (exact diffusion, EXTRA, three gradient-tracking placements, or plain
//! decentralized gradient descent as a baseline) and its own topology.
//!
//! The crate is `no_std` with `alloc`; file formats and the command line
//! live in `sparkle-cli`.

#![no_std]

extern crate alloc;

pub mod engine;
pub mod error;
pub mod hypergrad;
pub mod metrics;
pub mod problems;
pub mod reference;
pub mod rng;
pub mod strategy;
pub mod topology;

pub use engine::{Engine, Hyperparams, LevelPlan, LevelPlans, StepSchedule, Stepper, SwarmState};
pub use error::{Result, SparkleError};
pub use metrics::{MetricsContext, MetricsRow};
pub use problems::{BilevelProblem, OracleMode, OracleSample};
pub use strategy::Strategy;
pub use topology::{build_topology, MixingMatrix, TopologyKind};
