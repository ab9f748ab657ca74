//! Tick-level simulation of conventional and pipelined RL.
//!
//! One tick is one decode step for every in-progress sequence; trainer cost
//! is a whole number of ticks per optimizer step.

pub mod analysis;
pub mod config;
pub mod engine;
pub mod trace;

pub use analysis::{ess_trace, lag_structure, mean, steady_state_start};
pub use config::{DriftModel, LengthSampling, SimConfig};
pub use engine::{replay, run_conventional, run_pipeline};
pub use trace::{Conservation, Phase, SequenceFate, SimEvent, SimSequence, SimTrace, StepRecord, TickRecord};
