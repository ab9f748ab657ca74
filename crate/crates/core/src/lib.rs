//! Quantitative toolkit for asynchronous LLM reinforcement learning with
//! in-flight weight updates.
//!
//! - [`rl_math`]: exact toy policies, truncated importance weights, ESS,
//!   REINFORCE gradients and the mixed-behavior-policy KL experiment.
//! - [`throughput`]: the flash-unit analytical model of conventional and
//!   pipelined RL throughput, lag formulas and the `(H, I)` search.
//! - [`sim`]: a deterministic tick-level simulator of both training schemes.
//! - [`protocol`]: a loopback generation engine that accepts weight updates
//!   between tokens, plus the trainer-side client and a scenario driver.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod protocol;
pub mod rl_math;
pub mod rng;
pub mod sim;
pub mod throughput;

pub use error::{Error, Result};
