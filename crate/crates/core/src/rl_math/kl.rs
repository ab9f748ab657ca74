//! Exact per-position KL divergence between a behavior spec and a target
//! policy along given prefixes.

use super::policy::Policy;
use super::sampling::{BehaviorRoller, BehaviorSpec};
use super::trajectory::Trajectory;
use crate::error::{Error, Result};

/// `KL(p || q)` for categoricals given as log-probabilities. Returns `+inf`
/// when `q` puts zero mass where `p` does not.
pub fn categorical_kl(p_log: &[f64], q_log: &[f64]) -> f64 {
    p_log
        .iter()
        .zip(q_log)
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else if lq == f64::NEG_INFINITY {
                f64::INFINITY
            } else {
                p * (lp - lq)
            }
        })
        .sum::<f64>()
        .max(0.0)
}

/// Mean over prefixes of `KL(behavior(. | prefix_<t) || target(. | prefix_<t))`
/// at each position `t`. Positions are averaged over the trajectories long
/// enough to reach them; the result is as long as the longest trajectory.
pub fn kl_per_position(
    behavior: BehaviorSpec<'_>,
    target: &Policy,
    prompt_id: u64,
    prefixes: &[Trajectory],
) -> Result<Vec<f64>> {
    if behavior.vocab_size() != target.vocab_size() {
        return Err(Error::invalid("behavior and target policies differ in vocab_size"));
    }
    let longest = prefixes.iter().map(Trajectory::len).max().unwrap_or(0);
    let mut sums = vec![0.0; longest];
    let mut counts = vec![0usize; longest];
    for traj in prefixes {
        let mut roller = BehaviorRoller::new(behavior, prompt_id);
        let mut target_state = target.start(prompt_id);
        for (pos, &token) in traj.tokens.iter().enumerate() {
            let b = roller.next_logprobs();
            let t = target.next_logprobs(&target_state);
            sums[pos] += categorical_kl(&b, &t);
            counts[pos] += 1;
            roller.push(token)?;
            target.push(&mut target_state, token)?;
        }
    }
    Ok(sums.into_iter().zip(counts).map(|(s, n)| s / n as f64).collect())
}

/// Plain mean of a per-position curve (ignores nothing; `inf` propagates).
pub fn mean_curve(curve: &[f64]) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    curve.iter().sum::<f64>() / curve.len() as f64
}
