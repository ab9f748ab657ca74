use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distribution of generated sequence lengths, supported on `[1, L]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDistribution {
    /// Uniform on `1..=max_len`.
    Uniform {
        max_len: u32,
    },
    Constant {
        len: u32,
    },
    /// Uniform over the listed values (repeats allowed).
    Empirical {
        values: Vec<u32>,
    },
}

/// Mean length as an exact fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeanLength {
    pub num: u64,
    pub den: u64,
}

impl MeanLength {
    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl LengthDistribution {
    pub fn validate(&self) -> Result<()> {
        match self {
            LengthDistribution::Uniform { max_len } | LengthDistribution::Constant { len: max_len } => {
                if *max_len == 0 {
                    return Err(Error::invalid("lengths must be at least 1"));
                }
            }
            LengthDistribution::Empirical { values } => {
                if values.is_empty() || values.contains(&0) {
                    return Err(Error::invalid("empirical lengths must be nonempty and >= 1"));
                }
            }
        }
        Ok(())
    }

    /// `L`.
    pub fn max_len(&self) -> u32 {
        match self {
            LengthDistribution::Uniform { max_len } => *max_len,
            LengthDistribution::Constant { len } => *len,
            LengthDistribution::Empirical { values } => values.iter().copied().max().unwrap_or(0),
        }
    }

    /// `L̄` as an exact fraction.
    pub fn mean_exact(&self) -> MeanLength {
        match self {
            LengthDistribution::Uniform { max_len } => MeanLength {
                num: *max_len as u64 + 1,
                den: 2,
            },
            LengthDistribution::Constant { len } => MeanLength {
                num: *len as u64,
                den: 1,
            },
            LengthDistribution::Empirical { values } => MeanLength {
                num: values.iter().map(|&v| v as u64).sum(),
                den: values.len() as u64,
            },
        }
    }

    pub fn mean(&self) -> f64 {
        self.mean_exact().value()
    }

    /// `P(length >= l)`.
    pub fn survival(&self, l: u32) -> f64 {
        if l <= 1 {
            return 1.0;
        }
        match self {
            LengthDistribution::Uniform { max_len } => {
                if l > *max_len {
                    0.0
                } else {
                    (*max_len - l + 1) as f64 / *max_len as f64
                }
            }
            LengthDistribution::Constant { len } => {
                if l <= *len {
                    1.0
                } else {
                    0.0
                }
            }
            LengthDistribution::Empirical { values } => {
                values.iter().filter(|&&v| v >= l).count() as f64 / values.len() as f64
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        match self {
            LengthDistribution::Uniform { max_len } => rng.random_range(1..=*max_len),
            LengthDistribution::Constant { len } => *len,
            LengthDistribution::Empirical { values } => values[rng.random_range(0..values.len())],
        }
    }

    /// Deterministic enumeration: the `i`-th element of the support cycled
    /// in order (`1, 2, .., L, 1, ..` for uniform, the listed values for
    /// empirical).
    pub fn nth_cyclic(&self, i: u64) -> u32 {
        match self {
            LengthDistribution::Uniform { max_len } => (i % *max_len as u64) as u32 + 1,
            LengthDistribution::Constant { len } => *len,
            LengthDistribution::Empirical { values } => values[(i % values.len() as u64) as usize],
        }
    }
}
