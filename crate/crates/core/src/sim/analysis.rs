use std::collections::BTreeMap;
use std::ops::Range;

use rand_distr::{Distribution, Exp1};

use super::config::DriftModel;
use super::trace::SimTrace;
use crate::error::{Error, Result};
use crate::rl_math::{ess, truncated_is_weight, DEFAULT_IS_CLAMP};
use crate::rng::stream_rng;

/// Per-step token-lag histograms for `steps`.
pub fn lag_structure(trace: &SimTrace, steps: Range<usize>) -> Result<Vec<&BTreeMap<u64, u64>>> {
    if steps.start > steps.end || steps.end > trace.steps.len() {
        return Err(Error::invalid(format!(
            "step range {steps:?} outside 0..{}",
            trace.steps.len()
        )));
    }
    Ok(trace.steps[steps].iter().map(|s| &s.lag_histogram).collect())
}

/// First step whose batch holds no sequence started before the first weight
/// update (warm-start sequences count as started before it).
pub fn steady_state_start(trace: &SimTrace) -> Option<usize> {
    let first_update = trace.first_update_tick()?;
    trace.steps.iter().position(|step| {
        step.sequence_ids.iter().all(|&id| {
            trace.sequences[id as usize]
                .start_tick
                .is_some_and(|t| t >= first_update)
        })
    })
}

/// Batch ESS for every optimizer step under `drift`.
///
/// A sequence's log ratio is `-m * sum_t lag_t * e_t` with `e_t ~ Exp(1)`
/// drawn from the step's own stream, in batch then token order. Draws happen
/// for every token so they line up across magnitudes.
pub fn ess_trace(trace: &SimTrace, drift: &DriftModel) -> Result<Vec<f64>> {
    drift.validate()?;
    let mut out = Vec::with_capacity(trace.steps.len());
    for step in &trace.steps {
        let mut rng = stream_rng(drift.seed, step.step);
        let mut log_ratios = Vec::with_capacity(step.sequence_ids.len());
        for &id in &step.sequence_ids {
            let mut lr = 0.0;
            for &(v, n) in &trace.sequences[id as usize].token_versions {
                let lag = (step.version - v) as f64;
                for _ in 0..n {
                    let e: f64 = Exp1.sample(&mut rng);
                    lr -= drift.magnitude * lag * e;
                }
            }
            log_ratios.push(lr);
        }
        // ESS is scale free, so measure ratios against the batch's best
        // sequence to avoid underflow. All shifted ratios are <= 1, below the
        // clamp.
        let shift = log_ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights = log_ratios
            .iter()
            .map(|&lr| truncated_is_weight(lr, shift, DEFAULT_IS_CLAMP))
            .collect::<Result<Vec<_>>>()?;
        out.push(ess(&weights)?);
    }
    Ok(out)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}
