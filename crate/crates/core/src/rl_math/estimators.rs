//! Importance weights, effective sample size, the per-position baseline and
//! (importance-weighted) REINFORCE gradients on tabular policies.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::policy::{log_softmax, Policy, TabularPolicy};
use super::trajectory::Trajectory;
use crate::error::{Error, Result};

/// Default importance-weight clamp.
pub const DEFAULT_IS_CLAMP: f64 = 5.0;

/// `min(c, exp(pi_logprob_sum - mu_logprob_sum))`.
pub fn truncated_is_weight(pi_logprob_sum: f64, mu_logprob_sum: f64, c: f64) -> Result<f64> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::invalid(format!("clamp c must be positive and finite, got {c}")));
    }
    if !pi_logprob_sum.is_finite() || !mu_logprob_sum.is_finite() {
        return Err(Error::invalid("log-probability sums must be finite"));
    }
    let log_ratio = pi_logprob_sum - mu_logprob_sum;
    if log_ratio >= c.ln() {
        Ok(c)
    } else {
        Ok(log_ratio.exp())
    }
}

/// Normalized effective sample size `(sum w)^2 / (N sum w^2)`.
pub fn ess(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::invalid("ESS needs at least one weight"));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::invalid("ESS weights must be finite and nonnegative"));
    }
    // Rescale by the largest weight so the squares cannot overflow.
    let max = weights.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(Error::UndefinedEss);
    }
    let (sum, sum_sq) = weights.iter().fold((0.0, 0.0), |(s, s2), w| {
        let x = w / max;
        (s + x, s2 + x * x)
    });
    let value = sum * sum / (weights.len() as f64 * sum_sq);
    Ok(value.min(1.0))
}

/// Per-(prompt, position) value estimates `v(x, y_<=t)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineTable {
    pub values: BTreeMap<(u64, usize), f64>,
}

impl BaselineTable {
    pub fn get(&self, prompt_id: u64, position: usize) -> Result<f64> {
        self.values.get(&(prompt_id, position)).copied().ok_or_else(|| {
            Error::invalid(format!(
                "baseline has no value for prompt {prompt_id} position {position}"
            ))
        })
    }
}

/// Exact least-squares baseline over per-cell constants: the mean reward of
/// all trajectories of a prompt that reach a position.
pub fn fit_baseline(trajectories: &[Trajectory]) -> Result<BaselineTable> {
    if trajectories.is_empty() {
        return Err(Error::invalid("cannot fit a baseline to zero trajectories"));
    }
    let mut sums: BTreeMap<(u64, usize), (f64, usize)> = BTreeMap::new();
    for t in trajectories {
        if !t.reward.is_finite() {
            return Err(Error::invalid("rewards must be finite"));
        }
        for pos in 0..t.len() {
            let cell = sums.entry((t.prompt_id, pos)).or_insert((0.0, 0));
            cell.0 += t.reward;
            cell.1 += 1;
        }
    }
    Ok(BaselineTable {
        values: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
    })
}

/// How the importance ratio is formed in [`is_reinforce_gradient`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsGranularity {
    /// One truncated ratio of whole-sequence probabilities per trajectory.
    #[default]
    Sequence,
    /// A separate truncated ratio at every token.
    PerToken,
}

/// `(1/m) sum_j sum_t (R_j - v_{j,t}) grad log pi(y_{j,t} | context)` with
/// respect to the logits table.
pub fn reinforce_gradient(
    policy: &TabularPolicy,
    trajectories: &[Trajectory],
    baseline: &BaselineTable,
) -> Result<super::policy::LogitTable> {
    weighted_gradient(policy, trajectories, baseline, |_, _| Ok(1.0))
}

/// Like [`reinforce_gradient`], with each contribution scaled by a truncated
/// importance weight against the trajectory's behavior log-probabilities.
pub fn is_reinforce_gradient(
    policy: &TabularPolicy,
    trajectories: &[Trajectory],
    baseline: &BaselineTable,
    c: f64,
    granularity: IsGranularity,
) -> Result<super::policy::LogitTable> {
    let wrapped = Policy::Tabular(policy.clone());
    let mut seq_weights = Vec::with_capacity(trajectories.len());
    for t in trajectories {
        let pi = super::policy::policy_logprobs(&wrapped, t.prompt_id, &t.tokens)?;
        let w = match granularity {
            IsGranularity::Sequence => {
                let wj = truncated_is_weight(pi.iter().sum(), t.behavior_logprob_sum(), c)?;
                vec![wj; t.len()]
            }
            IsGranularity::PerToken => pi
                .iter()
                .zip(&t.behavior_logprobs)
                .map(|(p, m)| truncated_is_weight(*p, *m, c))
                .collect::<Result<Vec<_>>>()?,
        };
        seq_weights.push(w);
    }
    weighted_gradient(policy, trajectories, baseline, |j, pos| Ok(seq_weights[j][pos]))
}

fn weighted_gradient(
    policy: &TabularPolicy,
    trajectories: &[Trajectory],
    baseline: &BaselineTable,
    weight: impl Fn(usize, usize) -> Result<f64>,
) -> Result<super::policy::LogitTable> {
    policy.validate()?;
    let mut grad = super::policy::LogitTable::zeros_like(&policy.table);
    if trajectories.is_empty() {
        return Ok(grad);
    }
    let m = trajectories.len() as f64;
    let vocab = policy.vocab_size();
    for (j, t) in trajectories.iter().enumerate() {
        t.validate()?;
        for pos in 0..t.len() {
            let token = t.tokens[pos] as usize;
            if token >= vocab {
                return Err(Error::invalid(format!("token {token} outside vocabulary")));
            }
            let advantage = t.reward - baseline.get(t.prompt_id, pos)?;
            let scale = weight(j, pos)? * advantage / m;
            if scale == 0.0 {
                continue;
            }
            let key = policy.context_key(t.prompt_id, &t.tokens[..pos]);
            let probs: Vec<f64> = log_softmax(policy.table.row(&key)).into_iter().map(f64::exp).collect();
            let row = grad.row_mut(&key);
            for (k, g) in row.iter_mut().enumerate() {
                let indicator = if k == token { 1.0 } else { 0.0 };
                *g += scale * (indicator - probs[k]);
            }
        }
    }
    Ok(grad)
}

/// Surrogate objective `(1/m) sum_j sum_t A_{j,t} log pi(y_{j,t} | ...)` whose
/// gradient [`reinforce_gradient`] returns.
pub fn surrogate_objective(
    policy: &TabularPolicy,
    trajectories: &[Trajectory],
    baseline: &BaselineTable,
) -> Result<f64> {
    let wrapped = Policy::Tabular(policy.clone());
    let mut total = 0.0;
    for t in trajectories {
        let lps = super::policy::policy_logprobs(&wrapped, t.prompt_id, &t.tokens)?;
        for (pos, lp) in lps.iter().enumerate() {
            total += (t.reward - baseline.get(t.prompt_id, pos)?) * lp;
        }
    }
    Ok(total / trajectories.len().max(1) as f64)
}

/// Central finite-difference gradient of [`surrogate_objective`].
pub fn finite_difference_gradient(
    policy: &TabularPolicy,
    trajectories: &[Trajectory],
    baseline: &BaselineTable,
    step: f64,
) -> Result<super::policy::LogitTable> {
    let mut grad = super::policy::LogitTable::zeros_like(&policy.table);
    let mut probe = policy.clone();
    for i in 0..policy.table.num_params() {
        let original = *probe.table.param_mut(i);
        *probe.table.param_mut(i) = original + step;
        let plus = surrogate_objective(&probe, trajectories, baseline)?;
        *probe.table.param_mut(i) = original - step;
        let minus = surrogate_objective(&probe, trajectories, baseline)?;
        *probe.table.param_mut(i) = original;
        *grad.param_mut(i) = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Largest relative error `|a - b| / max(|a|, |b|, floor)` over all entries.
pub fn max_relative_error(a: &super::policy::LogitTable, b: &super::policy::LogitTable, floor: f64) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn traj(prompt_id: u64, tokens: Vec<u32>, reward: f64) -> Trajectory {
        let n = tokens.len();
        Trajectory {
            prompt_id,
            tokens,
            behavior_logprobs: vec![0.0; n],
            behavior_versions: vec![0; n],
            reward,
        }
    }

    #[test]
    fn truncated_weight_examples() {
        assert_eq!(truncated_is_weight(10f64.ln(), 0.0, 5.0).unwrap(), 5.0);
        assert_eq!(truncated_is_weight(-3.2, -3.2, 1.0).unwrap(), 1.0);
        assert_relative_eq!(truncated_is_weight(2f64.ln(), 0.0, 5.0).unwrap(), 2.0, epsilon = 1e-15);
        assert!(truncated_is_weight(f64::NAN, 0.0, 5.0).is_err());
        assert!(truncated_is_weight(0.0, f64::NEG_INFINITY, 5.0).is_err());
        assert!(truncated_is_weight(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn ess_examples() {
        assert_eq!(ess(&[1.0, 1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_relative_eq!(ess(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 0.25, epsilon = 1e-15);
        assert_relative_eq!(ess(&[2.0, 1.0, 1.0]).unwrap(), 16.0 / 18.0, epsilon = 1e-15);
        assert!(matches!(ess(&[0.0, 0.0]), Err(Error::UndefinedEss)));
        assert!(ess(&[-1.0, 2.0]).is_err());
        assert!(ess(&[]).is_err());
    }

    #[test]
    fn ess_survives_huge_weights() {
        assert_relative_eq!(ess(&[1e300, 1e300]).unwrap(), 1.0);
    }

    #[test]
    fn baseline_examples() {
        let b = fit_baseline(&[traj(0, vec![0, 1, 1], 0.0), traj(0, vec![1, 1], 1.0)]).unwrap();
        assert_eq!(b.get(0, 1).unwrap(), 0.5);
        assert_eq!(b.get(0, 2).unwrap(), 0.0);
        let single = fit_baseline(&[traj(4, vec![1, 0], 1.0)]).unwrap();
        assert_eq!(single.get(4, 0).unwrap(), 1.0);
        assert_eq!(single.get(4, 1).unwrap(), 1.0);
        assert!(fit_baseline(&[]).is_err());
    }

    #[test]
    fn zero_advantage_gives_zero_gradient() {
        let p = TabularPolicy::random(3, 1, &[0], 1.0, 2).unwrap();
        let ts = vec![traj(0, vec![0, 2], 1.0); 3];
        let b = fit_baseline(&ts).unwrap();
        let g = reinforce_gradient(&p, &ts, &b).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn single_token_gradient_by_hand() {
        let p = TabularPolicy::uniform(2).unwrap();
        let ts = vec![traj(0, vec![1], 1.0)];
        let mut b = BaselineTable::default();
        b.values.insert((0, 0), 0.0);
        let g = reinforce_gradient(&p, &ts, &b).unwrap();
        assert_eq!(g.default_row, vec![-0.5, 0.5]);
    }

    #[test]
    fn missing_baseline_cell_is_an_error() {
        let p = TabularPolicy::uniform(2).unwrap();
        let ts = vec![traj(0, vec![1, 1], 1.0)];
        let mut b = BaselineTable::default();
        b.values.insert((0, 0), 0.0);
        assert!(reinforce_gradient(&p, &ts, &b).is_err());
    }

    #[test]
    fn clamped_sequence_is_scaled_by_c() {
        let p = TabularPolicy::uniform(2).unwrap();
        let mut t = traj(0, vec![1, 0], 1.0);
        // Behavior assigned far lower probability than the uniform policy.
        t.behavior_logprobs = vec![-10.0, -10.0];
        let mut b = BaselineTable::default();
        b.values.insert((0, 0), 0.0);
        b.values.insert((0, 1), 0.25);
        let plain = reinforce_gradient(&p, &[t.clone()], &b).unwrap();
        let weighted = is_reinforce_gradient(&p, &[t], &b, 5.0, IsGranularity::Sequence).unwrap();
        for (w, g) in weighted.flatten().iter().zip(plain.flatten()) {
            assert_eq!(*w, 5.0 * g);
        }
    }

    #[test]
    fn per_token_weights_differ_from_sequence_weights() {
        let p = TabularPolicy::uniform(2).unwrap();
        let mut t = traj(0, vec![1, 0], 1.0);
        t.behavior_logprobs = vec![(0.25f64).ln(), (1.0f64).ln()];
        let mut b = BaselineTable::default();
        b.values.insert((0, 0), 0.0);
        b.values.insert((0, 1), 0.0);
        let seq = is_reinforce_gradient(&p, &[t.clone()], &b, 5.0, IsGranularity::Sequence).unwrap();
        let tok = is_reinforce_gradient(&p, &[t], &b, 5.0, IsGranularity::PerToken).unwrap();
        // Sequence ratio is (0.5*0.5)/(0.25*1) = 1; token ratios are 2 and 0.5.
        assert_relative_eq!(seq.default_row[1], 0.5 - 0.5, epsilon = 1e-15);
        assert_relative_eq!(tok.default_row[1], 2.0 * 0.5 + 0.5 * -0.5, epsilon = 1e-15);
    }
}
