use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::throughput::{LengthDistribution, Mode};

/// How target lengths are assigned to new sequences.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthSampling {
    /// Independent draws from the length distribution.
    #[default]
    Random,
    /// Sequence `i` gets the `i`-th support value, cycling.
    Cycle,
}

/// Synthetic off-policyness: each token contributes `-magnitude * lag * e`
/// to its sequence's log importance ratio, `e ~ Exp(1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftModel {
    pub magnitude: f64,
    #[serde(default)]
    pub seed: u64,
}

impl DriftModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.magnitude >= 0.0) || !self.magnitude.is_finite() {
            return Err(Error::invalid("drift magnitude must be finite and nonnegative"));
        }
        Ok(())
    }
}

fn default_one() -> u64 {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub mode: Mode,
    pub n_inference_units: u64,
    /// Slots per inference unit (pipeline mode).
    #[serde(default = "default_one")]
    pub gen_batch: u64,
    pub train_batch: u64,
    /// Optimizer steps per RL step (conventional mode).
    #[serde(default = "default_one")]
    pub steps_per_rl_step: u64,
    pub train_ticks_per_step: u64,
    #[serde(default)]
    pub weight_transfer_pause_ticks: u64,
    #[serde(default)]
    pub preprocessor_delay_ticks: u64,
    /// Ring buffer bound (pipeline mode). Unbounded when absent.
    #[serde(default)]
    pub queue_capacity: Option<u64>,
    pub lengths: LengthDistribution,
    #[serde(default)]
    pub length_sampling: LengthSampling,
    pub total_optimizer_steps: u64,
    #[serde(default)]
    pub seed: u64,
    /// Spread initial slot start ticks evenly over one maximum length so
    /// finishes are evenly spaced from the start (pipeline mode).
    #[serde(default = "default_true")]
    pub staggered_start: bool,
    /// Finished sequences placed in the ring buffer before tick 0, all at
    /// version 0 (pipeline mode).
    #[serde(default)]
    pub warm_start_sequences: u64,
    /// When present, every optimizer step records a batch ESS.
    #[serde(default)]
    pub drift: Option<DriftModel>,
}

impl SimConfig {
    /// `S = B G`.
    pub fn samples_per_rl_step(&self) -> u64 {
        self.train_batch * self.steps_per_rl_step
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_inference_units", self.n_inference_units),
            ("gen_batch", self.gen_batch),
            ("train_batch", self.train_batch),
            ("steps_per_rl_step", self.steps_per_rl_step),
            ("train_ticks_per_step", self.train_ticks_per_step),
            ("total_optimizer_steps", self.total_optimizer_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        self.lengths.validate()?;
        if let Some(drift) = &self.drift {
            drift.validate()?;
        }
        if let Some(cap) = self.queue_capacity {
            if cap < self.train_batch {
                return Err(Error::invalid(format!(
                    "queue_capacity ({cap}) must be at least train_batch ({})",
                    self.train_batch
                )));
            }
            if self.warm_start_sequences > cap {
                return Err(Error::invalid("warm_start_sequences exceeds queue_capacity"));
            }
        }
        if self.mode == Mode::Conventional && self.warm_start_sequences > 0 {
            return Err(Error::invalid("warm_start_sequences applies to pipeline mode only"));
        }
        Ok(())
    }
}
