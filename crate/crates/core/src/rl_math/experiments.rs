//! Canned experiments built from the primitives in this module: the
//! mixed-behavior-policy KL comparison, the gradient check and an ESS sweep
//! over policy drift.

use serde::{Deserialize, Serialize};

use super::estimators::{
    ess, finite_difference_gradient, fit_baseline, max_relative_error, reinforce_gradient, truncated_is_weight,
    DEFAULT_IS_CLAMP,
};
use super::kl::{kl_per_position, mean_curve};
use super::policy::{drifting_checkpoints, policy_logprobs, Policy, RecurrentToyPolicy, TabularPolicy};
use super::sampling::{mixed_policy_sample, sample_trajectories, BehaviorSpec, MixedPolicySchedule};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixedKlConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    #[serde(default = "one")]
    pub weight_scale: f64,
    /// Standard deviation of the per-checkpoint random-walk step.
    pub drift_magnitude: f64,
    pub max_lag: usize,
    pub max_len: usize,
    pub samples: usize,
    pub seed: u64,
    /// Number of checkpoints to generate; defaults to `max_lag + 1`.
    #[serde(default)]
    pub checkpoints: Option<usize>,
    /// Lags at which the conventional (single stale checkpoint) curve is
    /// evaluated; defaults to `[max_lag]`.
    #[serde(default)]
    pub conventional_lags: Vec<usize>,
    #[serde(default)]
    pub prompt_id: u64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlCurve {
    pub label: String,
    pub per_position: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedKlReport {
    pub schedule: MixedPolicySchedule,
    pub mixed_stale: KlCurve,
    pub mixed_recomputed: KlCurve,
    pub conventional: Vec<(usize, KlCurve)>,
}

impl MixedKlReport {
    pub fn conventional_at(&self, lag: usize) -> Option<&KlCurve> {
        self.conventional.iter().find(|(g, _)| *g == lag).map(|(_, c)| c)
    }

    /// `mean(stale) - mean(recomputed)`.
    pub fn stale_gap(&self) -> f64 {
        self.mixed_stale.mean - self.mixed_recomputed.mean
    }
}

fn curve(label: String, per_position: Vec<f64>) -> KlCurve {
    KlCurve {
        mean: mean_curve(&per_position),
        label,
        per_position,
    }
}

/// Compare mixed-policy sequences (stale and recomputed state) with
/// conventional lagged sampling on drifting recurrent checkpoints. Mixed
/// curves are measured against the checkpoint of the final segment;
/// conventional lag `g` samples from checkpoint 0 and is measured against
/// checkpoint `g`.
pub fn mixed_kl_study(cfg: &MixedKlConfig) -> Result<MixedKlReport> {
    let schedule = MixedPolicySchedule::new(cfg.max_len, cfg.max_lag)?;
    let lags = if cfg.conventional_lags.is_empty() {
        vec![cfg.max_lag]
    } else {
        cfg.conventional_lags.clone()
    };
    let n_checkpoints = cfg.checkpoints.unwrap_or(cfg.max_lag + 1);
    let needed = schedule.num_segments().max(lags.iter().copied().max().unwrap_or(0) + 1);
    if n_checkpoints < needed {
        return Err(Error::invalid(format!(
            "{n_checkpoints} checkpoints supplied but the schedule and lag grid need {needed}"
        )));
    }
    let base = Policy::Recurrent(RecurrentToyPolicy::random(
        cfg.vocab_size,
        cfg.hidden_dim,
        cfg.weight_scale,
        cfg.seed,
    ));
    let cps = drifting_checkpoints(&base, n_checkpoints, cfg.drift_magnitude, cfg.seed.wrapping_add(1));
    let final_cp = &cps[schedule.num_segments() - 1];
    let sample_seed = cfg.seed.wrapping_add(2);

    let mut mixed = Vec::new();
    for recompute in [false, true] {
        let trajs = mixed_policy_sample(
            &cps,
            &schedule,
            recompute,
            cfg.prompt_id,
            cfg.samples,
            cfg.max_len,
            sample_seed,
            None,
        )?;
        let spec = BehaviorSpec::Mixed {
            checkpoints: &cps,
            schedule: &schedule,
            recompute_state: recompute,
        };
        mixed.push(kl_per_position(spec, final_cp, cfg.prompt_id, &trajs)?);
    }
    let recomputed = mixed.pop().expect("two curves");
    let stale = mixed.pop().expect("two curves");

    let conv_trajs = sample_trajectories(&cps[0], cfg.prompt_id, cfg.samples, cfg.max_len, sample_seed, None)?;
    let mut conventional = Vec::new();
    for g in lags {
        let kl = kl_per_position(BehaviorSpec::Single(&cps[0]), &cps[g], cfg.prompt_id, &conv_trajs)?;
        conventional.push((g, curve(format!("conventional_lag_{g}"), kl)));
    }
    Ok(MixedKlReport {
        schedule,
        mixed_stale: curve("mixed_stale".into(), stale),
        mixed_recomputed: curve("mixed_recomputed".into(), recomputed),
        conventional,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckConfig {
    pub vocab_size: usize,
    pub context_order: usize,
    pub prompts: usize,
    pub trajectories_per_prompt: usize,
    pub max_len: usize,
    pub seed: u64,
    #[serde(default = "default_fd_step")]
    pub step: f64,
}

fn default_fd_step() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub num_params: usize,
    pub max_relative_error: f64,
    pub analytic: Vec<f64>,
    pub finite_difference: Vec<f64>,
}

/// Random tabular instance with Bernoulli rewards, analytic gradient versus
/// central finite differences of the surrogate objective.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let prompts: Vec<u64> = (0..cfg.prompts as u64).collect();
    let policy = TabularPolicy::random(cfg.vocab_size, cfg.context_order, &prompts, 1.0, cfg.seed)?;
    let wrapped = Policy::Tabular(policy.clone());
    let mut trajs = Vec::new();
    for &p in &prompts {
        let seed = cfg.seed.wrapping_add(1000 + p);
        trajs.extend(sample_trajectories(
            &wrapped,
            p,
            cfg.trajectories_per_prompt,
            cfg.max_len,
            seed,
            Some(0),
        )?);
    }
    let mut rng = stream_rng(cfg.seed, 77);
    for t in trajs.iter_mut() {
        t.reward = rand::Rng::random_range(&mut rng, 0.0..1.0);
    }
    let baseline = fit_baseline(&trajs)?;
    let analytic = reinforce_gradient(&policy, &trajs, &baseline)?;
    let fd = finite_difference_gradient(&policy, &trajs, &baseline, cfg.step)?;
    Ok(GradCheckReport {
        num_params: policy.table.num_params(),
        max_relative_error: max_relative_error(&analytic, &fd, 1e-6),
        analytic: analytic.flatten(),
        finite_difference: fd.flatten(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EssStudyConfig {
    pub vocab_size: usize,
    pub context_order: usize,
    pub prompts: usize,
    pub trajectories_per_prompt: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Distance of each target policy from the behavior policy.
    pub drift_magnitudes: Vec<f64>,
    #[serde(default = "default_clamp")]
    pub clamp: f64,
}

fn default_clamp() -> f64 {
    DEFAULT_IS_CLAMP
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EssWeight {
    pub magnitude: f64,
    pub trajectory: usize,
    pub prompt_id: u64,
    pub log_ratio: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EssRow {
    pub magnitude: f64,
    pub ess: f64,
    pub mean_weight: f64,
    /// Trajectories whose weight hit the clamp.
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssStudy {
    pub weights: Vec<EssWeight>,
    pub rows: Vec<EssRow>,
}

/// Sample from a random tabular behavior policy and weight the same
/// trajectories under targets drifted from it by each magnitude. The drift
/// direction is shared, so the targets lie on one ray from the behavior.
pub fn ess_study(cfg: &EssStudyConfig) -> Result<EssStudy> {
    if cfg.drift_magnitudes.is_empty() {
        return Err(Error::invalid("drift_magnitudes is empty"));
    }
    let prompts: Vec<u64> = (0..cfg.prompts as u64).collect();
    let behavior = Policy::Tabular(TabularPolicy::random(
        cfg.vocab_size,
        cfg.context_order,
        &prompts,
        1.0,
        cfg.seed,
    )?);
    let mut trajs = Vec::new();
    for &p in &prompts {
        let seed = cfg.seed.wrapping_add(1000 + p);
        trajs.extend(sample_trajectories(
            &behavior,
            p,
            cfg.trajectories_per_prompt,
            cfg.max_len,
            seed,
            Some(0),
        )?);
    }
    let mut weights = Vec::new();
    let mut rows = Vec::new();
    for &m in &cfg.drift_magnitudes {
        if !(m >= 0.0) || !m.is_finite() {
            return Err(Error::invalid(format!(
                "drift magnitude must be finite and nonnegative, got {m}"
            )));
        }
        let target = drifting_checkpoints(&behavior, 2, m, cfg.seed.wrapping_add(1))
            .pop()
            .expect("two");
        let mut ws = Vec::with_capacity(trajs.len());
        for (i, t) in trajs.iter().enumerate() {
            let pi: f64 = policy_logprobs(&target, t.prompt_id, &t.tokens)?.iter().sum();
            let mu: f64 = t.behavior_logprobs.iter().sum();
            let w = truncated_is_weight(pi, mu, cfg.clamp)?;
            weights.push(EssWeight {
                magnitude: m,
                trajectory: i,
                prompt_id: t.prompt_id,
                log_ratio: pi - mu,
                weight: w,
            });
            ws.push(w);
        }
        rows.push(EssRow {
            magnitude: m,
            ess: ess(&ws)?,
            mean_weight: ws.iter().sum::<f64>() / ws.len() as f64,
            clamped: ws.iter().filter(|&&w| w == cfg.clamp).count(),
        });
    }
    Ok(EssStudy { weights, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_checkpoints_give_zero_curves() {
        let cfg = MixedKlConfig {
            vocab_size: 4,
            hidden_dim: 3,
            weight_scale: 1.0,
            drift_magnitude: 0.0,
            max_lag: 4,
            max_len: 16,
            samples: 20,
            seed: 1,
            checkpoints: None,
            conventional_lags: vec![1, 4],
            prompt_id: 0,
        };
        let r = mixed_kl_study(&cfg).unwrap();
        assert!(r.mixed_stale.per_position.iter().all(|&k| k == 0.0));
        assert!(r.mixed_recomputed.per_position.iter().all(|&k| k == 0.0));
        for (_, c) in &r.conventional {
            assert!(c.per_position.iter().all(|&k| k == 0.0));
        }
    }

    #[test]
    fn too_few_checkpoints_is_an_error() {
        let cfg = MixedKlConfig {
            vocab_size: 4,
            hidden_dim: 3,
            weight_scale: 1.0,
            drift_magnitude: 0.1,
            max_lag: 4,
            max_len: 16,
            samples: 5,
            seed: 1,
            checkpoints: Some(2),
            conventional_lags: vec![],
            prompt_id: 0,
        };
        assert!(mixed_kl_study(&cfg).is_err());
    }

    #[test]
    fn grad_check_small_instance() {
        let cfg = GradCheckConfig {
            vocab_size: 3,
            context_order: 1,
            prompts: 2,
            trajectories_per_prompt: 6,
            max_len: 5,
            seed: 3,
            step: 1e-5,
        };
        let r = grad_check(&cfg).unwrap();
        assert!(r.num_params <= 100);
        assert!(r.max_relative_error < 1e-4, "{}", r.max_relative_error);
    }

    #[test]
    fn ess_study_on_policy_is_one() {
        let cfg = EssStudyConfig {
            vocab_size: 3,
            context_order: 1,
            prompts: 2,
            trajectories_per_prompt: 20,
            max_len: 6,
            seed: 4,
            drift_magnitudes: vec![0.0, 0.5, 2.0],
            clamp: 5.0,
        };
        let r = ess_study(&cfg).unwrap();
        assert_eq!(r.rows[0].ess, 1.0);
        assert!(r.rows.iter().all(|row| row.ess > 0.0 && row.ess <= 1.0));
        assert!(r.rows[2].ess < 1.0);
        assert_eq!(r.weights.len(), 3 * 40);
    }
}
