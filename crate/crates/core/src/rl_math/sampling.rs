//! Ancestral sampling from single and mixed (checkpoint-switching) behavior
//! policies.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::policy::{DecodeState, Policy};
use super::trajectory::Trajectory;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, StreamRng};

/// Token positions at which a mixed behavior policy moves to the next
/// checkpoint. The first switch waits `floor(2L / g_max)` tokens (the startup
/// bubble), later ones `floor(L / g_max)` tokens apart. Switches at or beyond
/// `L` are dropped and at most `g_max` are kept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixedPolicySchedule {
    pub max_len: usize,
    pub max_lag: usize,
    pub switch_points: Vec<usize>,
}

impl MixedPolicySchedule {
    pub fn new(max_len: usize, max_lag: usize) -> Result<Self> {
        if max_len == 0 || max_lag == 0 {
            return Err(Error::invalid("max_len and max_lag must be positive"));
        }
        let first = 2 * max_len / max_lag;
        let stride = max_len / max_lag;
        let mut switch_points = Vec::new();
        if first < max_len {
            if stride == 0 {
                return Err(Error::invalid(format!(
                    "max_lag {max_lag} exceeds max_len {max_len}; switch points would not increase"
                )));
            }
            let mut t = first;
            while t < max_len && switch_points.len() < max_lag {
                switch_points.push(t);
                t += stride;
            }
        }
        Ok(MixedPolicySchedule {
            max_len,
            max_lag,
            switch_points,
        })
    }

    /// A schedule with explicit switch points (strictly increasing, `< max_len`).
    pub fn from_switch_points(max_len: usize, switch_points: Vec<usize>) -> Result<Self> {
        if switch_points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("switch points must be strictly increasing"));
        }
        if switch_points.last().is_some_and(|&t| t >= max_len) {
            return Err(Error::invalid("switch points must lie below max_len"));
        }
        Ok(MixedPolicySchedule {
            max_len,
            max_lag: switch_points.len().max(1),
            switch_points,
        })
    }

    pub fn num_segments(&self) -> usize {
        self.switch_points.len() + 1
    }

    /// Checkpoint offset in effect at `position`.
    pub fn segment_at(&self, position: usize) -> usize {
        self.switch_points.partition_point(|&t| t <= position)
    }
}

/// The distribution tokens are drawn from.
#[derive(Debug, Clone, Copy)]
pub enum BehaviorSpec<'a> {
    Single(&'a Policy),
    /// Checkpoint `C + g` is active in segment `g` of `schedule`. With
    /// `recompute_state` the hidden state is rebuilt under the new
    /// checkpoint at every switch; otherwise it is carried over stale.
    Mixed {
        checkpoints: &'a [Policy],
        schedule: &'a MixedPolicySchedule,
        recompute_state: bool,
    },
}

impl<'a> BehaviorSpec<'a> {
    fn validate(&self) -> Result<()> {
        if let BehaviorSpec::Mixed {
            checkpoints, schedule, ..
        } = self
        {
            if checkpoints.len() < schedule.num_segments() {
                return Err(Error::invalid(format!(
                    "schedule has {} segments but only {} checkpoints were supplied",
                    schedule.num_segments(),
                    checkpoints.len()
                )));
            }
            let vocab = checkpoints[0].vocab_size();
            if checkpoints.iter().any(|c| c.vocab_size() != vocab) {
                return Err(Error::invalid("checkpoints disagree on vocab_size"));
            }
        }
        Ok(())
    }

    fn policy(&self, segment: usize) -> &'a Policy {
        match self {
            BehaviorSpec::Single(p) => p,
            BehaviorSpec::Mixed { checkpoints, .. } => &checkpoints[segment],
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.policy(0).vocab_size()
    }
}

/// Step-by-step evaluation of a behavior spec along one sequence. Sampling,
/// log-probability replay and KL evaluation all go through this type so that
/// they see bit-identical distributions.
pub struct BehaviorRoller<'a> {
    spec: BehaviorSpec<'a>,
    state: DecodeState,
    segment: usize,
}

impl<'a> BehaviorRoller<'a> {
    pub fn new(spec: BehaviorSpec<'a>, prompt_id: u64) -> Self {
        BehaviorRoller {
            state: spec.policy(0).start(prompt_id),
            spec,
            segment: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.state.prefix.len()
    }

    /// Version offset (checkpoint index) active at the current position.
    pub fn segment(&self) -> usize {
        self.segment
    }

    /// Next-token log-probabilities, switching checkpoint first if the
    /// current position is a switch point.
    pub fn next_logprobs(&mut self) -> Vec<f64> {
        if let BehaviorSpec::Mixed {
            schedule,
            recompute_state,
            ..
        } = self.spec
        {
            let seg = schedule.segment_at(self.position());
            if seg != self.segment {
                self.segment = seg;
                if recompute_state {
                    self.spec.policy(seg).recompute(&mut self.state);
                }
            }
        }
        self.spec.policy(self.segment).next_logprobs(&self.state)
    }

    pub fn push(&mut self, token: u32) -> Result<()> {
        self.spec.policy(self.segment).push(&mut self.state, token)
    }
}

/// Inverse-CDF draw from a categorical given in log space.
pub fn sample_categorical(logprobs: &[f64], rng: &mut StreamRng) -> u32 {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, lp) in logprobs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last_positive = i;
        }
        cumulative += p;
        if u < cumulative {
            return i as u32;
        }
    }
    last_positive as u32
}

fn sample_with(
    spec: BehaviorSpec<'_>,
    prompt_id: u64,
    count: usize,
    max_len: usize,
    seed: u64,
    terminator: Option<u32>,
) -> Result<Vec<Trajectory>> {
    if count == 0 || max_len == 0 {
        return Err(Error::invalid("count and max_len must be positive"));
    }
    spec.validate()?;
    if let Some(t) = terminator {
        if t as usize >= spec.vocab_size() {
            return Err(Error::invalid(format!("terminator {t} outside vocabulary")));
        }
    }
    (0..count)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let mut roller = BehaviorRoller::new(spec, prompt_id);
            let mut traj = Trajectory {
                prompt_id,
                tokens: Vec::new(),
                behavior_logprobs: Vec::new(),
                behavior_versions: Vec::new(),
                reward: 0.0,
            };
            while traj.tokens.len() < max_len {
                let lps = roller.next_logprobs();
                let token = sample_categorical(&lps, &mut rng);
                traj.tokens.push(token);
                traj.behavior_logprobs.push(lps[token as usize]);
                traj.behavior_versions.push(roller.segment() as u64);
                roller.push(token)?;
                if Some(token) == terminator {
                    break;
                }
            }
            Ok(traj)
        })
        .collect()
}

/// `count` independent trajectories; trajectory `i` uses random sub-stream
/// `i` of `seed`. Rewards are left at zero.
pub fn sample_trajectories(
    policy: &Policy,
    prompt_id: u64,
    count: usize,
    max_len: usize,
    seed: u64,
    terminator: Option<u32>,
) -> Result<Vec<Trajectory>> {
    sample_with(
        BehaviorSpec::Single(policy),
        prompt_id,
        count,
        max_len,
        seed,
        terminator,
    )
}

/// Trajectories whose segment `g` is sampled under `checkpoints[g]`.
#[allow(clippy::too_many_arguments)]
pub fn mixed_policy_sample(
    checkpoints: &[Policy],
    schedule: &MixedPolicySchedule,
    recompute_state: bool,
    prompt_id: u64,
    count: usize,
    max_len: usize,
    seed: u64,
    terminator: Option<u32>,
) -> Result<Vec<Trajectory>> {
    if schedule.max_len != max_len {
        return Err(Error::invalid(format!(
            "schedule built for max_len {} but sampling with max_len {max_len}",
            schedule.max_len
        )));
    }
    if checkpoints.is_empty() {
        return Err(Error::invalid("at least one checkpoint is required"));
    }
    let spec = BehaviorSpec::Mixed {
        checkpoints,
        schedule,
        recompute_state,
    };
    sample_with(spec, prompt_id, count, max_len, seed, terminator)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rl_math::policy::{RecurrentToyPolicy, TabularPolicy};

    #[test]
    fn schedule_formula() {
        let s = MixedPolicySchedule::new(64, 32).unwrap();
        assert_eq!(s.switch_points.first(), Some(&4));
        assert!(s.switch_points.windows(2).all(|w| w[1] - w[0] == 2));
        assert_eq!(s.switch_points.last(), Some(&62));
        assert!(s.switch_points.len() <= 32);

        let none = MixedPolicySchedule::new(8, 2).unwrap();
        assert!(none.switch_points.is_empty());
        assert_eq!(none.segment_at(7), 0);

        let s = MixedPolicySchedule::new(100, 4).unwrap();
        assert_eq!(s.switch_points, vec![50, 75]);
        assert_eq!(s.segment_at(49), 0);
        assert_eq!(s.segment_at(50), 1);
        assert_eq!(s.segment_at(99), 2);
    }

    #[test]
    fn schedule_caps_switch_count() {
        // floor(L/g) = 1 would otherwise yield 7 switches for g = 6.
        let s = MixedPolicySchedule::new(10, 6).unwrap();
        assert_eq!(s.switch_points, vec![3, 4, 5, 6, 7, 8]);
        assert!(MixedPolicySchedule::new(4, 9).is_err());
        assert!(MixedPolicySchedule::new(0, 1).is_err());
    }

    #[test]
    fn terminator_first_policy_stops_immediately() {
        let p = Policy::Tabular(TabularPolicy::single_row(vec![50.0, -50.0, -50.0]).unwrap());
        let ts = sample_trajectories(&p, 0, 20, 10, 1, Some(0)).unwrap();
        assert!(ts.iter().all(|t| t.tokens == vec![0]));
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = Policy::Recurrent(RecurrentToyPolicy::random(5, 4, 1.0, 3));
        let a = sample_trajectories(&p, 2, 8, 12, 99, None).unwrap();
        let b = sample_trajectories(&p, 2, 8, 12, 99, None).unwrap();
        assert_eq!(a, b);
        let c = sample_trajectories(&p, 2, 8, 12, 100, None).unwrap();
        assert_ne!(a, c);
        assert!(a.iter().all(|t| t.behavior_versions.iter().all(|&v| v == 0)));
    }

    #[test]
    fn behavior_logprobs_match_policy() {
        let p = Policy::Recurrent(RecurrentToyPolicy::random(4, 3, 1.0, 8));
        for t in sample_trajectories(&p, 1, 5, 9, 4, None).unwrap() {
            let lps = crate::rl_math::policy::policy_logprobs(&p, 1, &t.tokens).unwrap();
            assert_eq!(lps, t.behavior_logprobs);
        }
    }

    #[test]
    fn identical_checkpoints_reproduce_single_policy() {
        let p = Policy::Recurrent(RecurrentToyPolicy::random(4, 3, 1.0, 8));
        let cps = vec![p.clone(); 4];
        let sched = MixedPolicySchedule::new(16, 4).unwrap();
        let single = sample_trajectories(&p, 0, 6, 16, 5, None).unwrap();
        for recompute in [false, true] {
            let mixed = mixed_policy_sample(&cps, &sched, recompute, 0, 6, 16, 5, None).unwrap();
            for (m, s) in mixed.iter().zip(&single) {
                assert_eq!(m.tokens, s.tokens);
                assert_eq!(m.behavior_logprobs, s.behavior_logprobs);
            }
        }
    }

    #[test]
    fn tabular_checkpoints_ignore_recompute() {
        let base = Policy::Tabular(TabularPolicy::random(3, 2, &[0], 1.0, 1).unwrap());
        let cps = crate::rl_math::policy::drifting_checkpoints(&base, 5, 0.5, 2);
        let sched = MixedPolicySchedule::new(20, 4).unwrap();
        let a = mixed_policy_sample(&cps, &sched, false, 0, 10, 20, 3, None).unwrap();
        let b = mixed_policy_sample(&cps, &sched, true, 0, 10, 20, 3, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn versions_follow_schedule() {
        let base = Policy::Recurrent(RecurrentToyPolicy::random(3, 2, 1.0, 1));
        let cps = crate::rl_math::policy::drifting_checkpoints(&base, 3, 0.5, 2);
        let sched = MixedPolicySchedule::new(12, 4).unwrap();
        assert_eq!(sched.switch_points, vec![6, 9]);
        let ts = mixed_policy_sample(&cps, &sched, false, 0, 3, 12, 3, None).unwrap();
        for t in ts {
            let expected: Vec<u64> = (0..12).map(|i| sched.segment_at(i) as u64).collect();
            assert_eq!(t.behavior_versions, expected);
        }
    }

    #[test]
    fn mixed_rejects_bad_inputs() {
        let p = Policy::Tabular(TabularPolicy::uniform(2).unwrap());
        let sched = MixedPolicySchedule::new(12, 4).unwrap();
        assert!(mixed_policy_sample(std::slice::from_ref(&p), &sched, false, 0, 1, 12, 0, None).is_err());
        assert!(mixed_policy_sample(&vec![p.clone(); 3], &sched, false, 0, 1, 10, 0, None).is_err());
        assert!(mixed_policy_sample(&vec![p; 3], &sched, false, 0, 1, 12, 0, None).is_ok());
    }
}
