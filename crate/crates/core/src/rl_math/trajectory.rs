use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One sampled sequence with the behavior policy's per-token bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_id: u64,
    pub tokens: Vec<u32>,
    pub behavior_logprobs: Vec<f64>,
    pub behavior_versions: Vec<u64>,
    pub reward: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn behavior_logprob_sum(&self) -> f64 {
        self.behavior_logprobs.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(Error::invalid("trajectory must contain at least one token"));
        }
        if self.behavior_logprobs.len() != n || self.behavior_versions.len() != n {
            return Err(Error::invalid(
                "tokens, behavior_logprobs and behavior_versions differ in length",
            ));
        }
        if self.behavior_versions.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("behavior_versions must be nondecreasing"));
        }
        Ok(())
    }
}

/// Write one JSON record per line.
pub fn write_trajectories<W: Write>(mut out: W, trajectories: &[Trajectory]) -> Result<()> {
    for t in trajectories {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trajectories<R: BufRead>(input: R) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory = serde_json::from_str(&line)?;
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

/// Set each trajectory's reward to `reward(trajectory)`.
pub fn assign_rewards(trajectories: &mut [Trajectory], reward: impl Fn(&Trajectory) -> f64) {
    for t in trajectories.iter_mut() {
        t.reward = reward(t);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj() -> Trajectory {
        Trajectory {
            prompt_id: 3,
            tokens: vec![1, 0],
            behavior_logprobs: vec![-0.1, -0.7],
            behavior_versions: vec![0, 1],
            reward: 1.0,
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let ts = vec![traj(), traj()];
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &ts).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 2);
        assert_eq!(read_trajectories(&buf[..]).unwrap(), ts);
    }

    #[test]
    fn validation() {
        assert!(traj().validate().is_ok());
        let mut t = traj();
        t.behavior_versions = vec![2, 1];
        assert!(t.validate().is_err());
        let mut t = traj();
        t.behavior_logprobs.pop();
        assert!(t.validate().is_err());
        let mut t = traj();
        t.tokens.clear();
        t.behavior_logprobs.clear();
        t.behavior_versions.clear();
        assert!(t.validate().is_err());
    }
}
