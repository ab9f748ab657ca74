//! Flash-unit throughput of conventional and pipelined RL.
//!
//! All times are in flashes and all rates in tokens per flash. Conventional
//! RL alternates a generation phase on all `N` accelerators with a training
//! phase on all `N`; pipelined RL runs generation on `I` accelerators at a
//! constant batch `H` and training on the remaining `N - I` concurrently.

use serde::{Deserialize, Serialize};

use super::curve::{flash_seconds, FlashScale, UtilizationCurve};
use super::lengths::LengthDistribution;
use crate::error::{Error, Result};

/// `τ` implied by a 128-accelerator cluster with 44 generating that trains
/// at 17.08 tokens per flash: `(128 - 44) / 17.08`.
pub const DEFAULT_TAU: f64 = 84.0 / 17.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Conventional,
    Pipeline,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Conventional => "conventional",
            Mode::Pipeline => "pipeline",
        })
    }
}

/// Unit a lag figure is expressed in. Conventional lag is naturally counted
/// in samples, pipeline lag in optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LagUnit {
    Samples,
    OptimizerSteps,
}

impl std::fmt::Display for LagUnit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LagUnit::Samples => "samples",
            LagUnit::OptimizerSteps => "optimizer_steps",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    /// `N`
    pub n_accelerators: u64,
    /// `B`
    pub train_batch: u64,
    /// `G`, conventional mode.
    pub steps_per_rl_step: u64,
    /// `H`, pipeline mode.
    pub gen_batch: u64,
    /// `I`, pipeline mode.
    pub inference_count: u64,
    /// `τ`, flashes per trained token.
    pub tau: f64,
    pub curve: UtilizationCurve,
    pub lengths: LengthDistribution,
    pub use_padding: bool,
}

impl ClusterSpec {
    /// `S = B G`.
    pub fn samples_per_rl_step(&self) -> u64 {
        self.train_batch * self.steps_per_rl_step
    }

    pub fn validate(&self, mode: Mode) -> Result<()> {
        if self.n_accelerators == 0 || self.train_batch == 0 {
            return Err(Error::invalid("N and B must be positive"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid("tau must be positive and finite"));
        }
        self.lengths.validate()?;
        match mode {
            Mode::Conventional if self.steps_per_rl_step == 0 => Err(Error::invalid("G must be positive")),
            Mode::Pipeline if self.gen_batch == 0 => Err(Error::invalid("H must be positive")),
            Mode::Pipeline if self.inference_count == 0 || self.inference_count >= self.n_accelerators => {
                Err(Error::invalid(format!(
                    "pipeline mode needs 1 <= I < N, got I = {} with N = {}",
                    self.inference_count, self.n_accelerators
                )))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub mode: Mode,
    pub r_gen: f64,
    pub r_train: f64,
    pub r_total: f64,
    /// Conventional phase durations; absent in pipeline mode.
    pub t_gen: Option<f64>,
    pub t_train: Option<f64>,
    pub g_max: u64,
    pub lag_unit: LagUnit,
    pub gen_batch: Option<u64>,
    pub inference_count: Option<u64>,
    pub samples_per_rl_step: Option<u64>,
}

impl ThroughputReport {
    /// Total throughput in tokens per second at a concrete flash scale.
    pub fn tokens_per_second(&self, scale: &FlashScale) -> f64 {
        self.r_total / flash_seconds(scale)
    }
}

/// `h(l) = s P(len >= l)` for `l = 1..=L`: expected sequences still decoding
/// at step `l`.
pub fn inflight_profile(lengths: &LengthDistribution, s: u64) -> Vec<f64> {
    (1..=lengths.max_len())
        .map(|l| s as f64 * lengths.survival(l))
        .collect()
}

/// Conventional `(t_gen, t_train)` for an RL step of `s` sequences.
pub fn conv_times_for_samples(spec: &ClusterSpec, s: u64) -> Result<(f64, f64)> {
    let n = spec.n_accelerators as f64;
    let mut t_gen = 0.0;
    for h in inflight_profile(&spec.lengths, s) {
        if h <= 0.0 {
            continue;
        }
        let per_accel = h / n;
        t_gen += per_accel / spec.curve.utilization(per_accel, spec.use_padding)?;
    }
    let k = s as f64 * spec.lengths.mean();
    let t_train = k * spec.tau / n;
    Ok((t_gen, t_train))
}

/// Conventional `(t_gen, t_train)` with `S = B G`.
pub fn conv_times(spec: &ClusterSpec) -> Result<(f64, f64)> {
    spec.validate(Mode::Conventional)?;
    conv_times_for_samples(spec, spec.samples_per_rl_step())
}

/// Conventional throughput for an RL step of `s` sequences; lag `s - 1`
/// samples.
pub fn conv_throughput_for_samples(spec: &ClusterSpec, s: u64) -> Result<ThroughputReport> {
    if s == 0 {
        return Err(Error::invalid("S must be positive"));
    }
    let (t_gen, t_train) = conv_times_for_samples(spec, s)?;
    let k = s as f64 * spec.lengths.mean();
    Ok(ThroughputReport {
        mode: Mode::Conventional,
        r_gen: k / t_gen,
        r_train: spec.n_accelerators as f64 / spec.tau,
        r_total: k / (t_gen + t_train),
        t_gen: Some(t_gen),
        t_train: Some(t_train),
        g_max: s - 1,
        lag_unit: LagUnit::Samples,
        gen_batch: None,
        inference_count: None,
        samples_per_rl_step: Some(s),
    })
}

pub fn conv_throughput(spec: &ClusterSpec) -> Result<ThroughputReport> {
    spec.validate(Mode::Conventional)?;
    conv_throughput_for_samples(spec, spec.samples_per_rl_step())
}

/// `ceil(H I L / (L̄ B))`, evaluated exactly.
pub fn pipeline_max_lag(gen_batch: u64, inference_count: u64, lengths: &LengthDistribution, train_batch: u64) -> u64 {
    let mean = lengths.mean_exact();
    let num = gen_batch as u128 * inference_count as u128 * lengths.max_len() as u128 * mean.den as u128;
    let den = mean.num as u128 * train_batch as u128;
    num.div_ceil(den) as u64
}

/// Pipeline rates for explicit `(H, I)` given a precomputed `U(H)`.
pub(crate) fn pipeline_report(spec: &ClusterSpec, gen_batch: u64, inference_count: u64, u_h: f64) -> ThroughputReport {
    let r_gen = u_h * inference_count as f64;
    let r_train = (spec.n_accelerators - inference_count) as f64 / spec.tau;
    ThroughputReport {
        mode: Mode::Pipeline,
        r_gen,
        r_train,
        r_total: r_gen.min(r_train),
        t_gen: None,
        t_train: None,
        g_max: pipeline_max_lag(gen_batch, inference_count, &spec.lengths, spec.train_batch),
        lag_unit: LagUnit::OptimizerSteps,
        gen_batch: Some(gen_batch),
        inference_count: Some(inference_count),
        samples_per_rl_step: None,
    }
}

pub fn pipeline_throughput(spec: &ClusterSpec) -> Result<ThroughputReport> {
    spec.validate(Mode::Pipeline)?;
    let u_h = spec.curve.utilization(spec.gen_batch as f64, spec.use_padding)?;
    Ok(pipeline_report(spec, spec.gen_batch, spec.inference_count, u_h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn spec(curve: UtilizationCurve, lengths: LengthDistribution) -> ClusterSpec {
        ClusterSpec {
            n_accelerators: 1,
            train_batch: 4,
            steps_per_rl_step: 1,
            gen_batch: 1,
            inference_count: 1,
            tau: 1.0,
            curve,
            lengths,
            use_padding: false,
        }
    }

    #[test]
    fn profiles() {
        assert_eq!(
            inflight_profile(&LengthDistribution::Constant { len: 3 }, 5),
            vec![5.0; 3]
        );
        assert_eq!(
            inflight_profile(&LengthDistribution::Uniform { max_len: 4 }, 4),
            vec![4.0, 3.0, 2.0, 1.0]
        );
        assert_eq!(
            inflight_profile(&LengthDistribution::Empirical { values: vec![2, 2, 5] }, 3),
            vec![3.0, 3.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn conv_times_by_hand() {
        // N = 1, S = 4, uniform(1..4), U = 0.5 → (4+3+2+1)/0.5.
        let s = spec(
            UtilizationCurve::constant(0.5).unwrap(),
            LengthDistribution::Uniform { max_len: 4 },
        );
        let (t_gen, _) = conv_times(&s).unwrap();
        assert_relative_eq!(t_gen, 20.0, epsilon = 1e-12);

        // Perfect utilization and constant lengths: S L / N tokens per accelerator.
        let mut s = spec(
            UtilizationCurve::constant(1.0).unwrap(),
            LengthDistribution::Constant { len: 6 },
        );
        s.n_accelerators = 2;
        s.train_batch = 8;
        let (t_gen, _) = conv_times(&s).unwrap();
        assert_relative_eq!(t_gen, 8.0 * 6.0 / 2.0, epsilon = 1e-12);

        // K = 1000 tokens, tau = 5, N = 10.
        let mut s = spec(
            UtilizationCurve::constant(1.0).unwrap(),
            LengthDistribution::Constant { len: 10 },
        );
        s.n_accelerators = 10;
        s.train_batch = 100;
        s.tau = 5.0;
        let (_, t_train) = conv_times(&s).unwrap();
        assert_relative_eq!(t_train, 500.0, epsilon = 1e-12);
    }

    #[test]
    fn conv_composition() {
        let mut s = spec(
            UtilizationCurve::constant(0.25).unwrap(),
            LengthDistribution::Uniform { max_len: 9 },
        );
        s.n_accelerators = 3;
        s.steps_per_rl_step = 5;
        let r = conv_throughput(&s).unwrap();
        let k = 20.0 * 5.0;
        assert_eq!(r.r_total, k / (r.t_gen.unwrap() + r.t_train.unwrap()));
        assert_relative_eq!(r.r_total, 1.0 / (1.0 / r.r_gen + 1.0 / r.r_train), max_relative = 1e-12);
        assert_eq!(r.g_max, 19);
        assert_eq!(r.lag_unit, LagUnit::Samples);
    }

    #[test]
    fn equal_rates_halve() {
        // r_gen = U N = 1 with U = 1/N... choose U = 1, tau = 1 so both rates equal N.
        let mut s = spec(
            UtilizationCurve::constant(1.0).unwrap(),
            LengthDistribution::Constant { len: 4 },
        );
        s.n_accelerators = 2;
        let r = conv_throughput(&s).unwrap();
        assert_relative_eq!(r.r_gen, r.r_train, epsilon = 1e-12);
        assert_relative_eq!(r.r_total, r.r_gen / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn pipeline_rates() {
        let curve = UtilizationCurve::new(vec![(192, 0.384)]).unwrap();
        let s = ClusterSpec {
            n_accelerators: 128,
            train_batch: 128,
            steps_per_rl_step: 1,
            gen_batch: 192,
            inference_count: 44,
            tau: DEFAULT_TAU,
            curve,
            lengths: LengthDistribution::Uniform { max_len: 2048 },
            use_padding: false,
        };
        let r = pipeline_throughput(&s).unwrap();
        assert_relative_eq!(r.r_gen, 16.896, epsilon = 1e-12);
        assert_relative_eq!(r.r_train, 17.08, epsilon = 1e-12);
        assert_eq!(r.r_total, r.r_gen.min(r.r_train));
        assert_eq!(r.g_max, 132);
        assert_eq!(r.lag_unit, LagUnit::OptimizerSteps);
    }

    #[test]
    fn max_lag_formula() {
        // L / L̄ exactly 2: empirical lengths {1, ..} with mean L/2.
        let lengths = LengthDistribution::Empirical {
            values: vec![2048, 1, 1023],
        };
        assert_eq!(lengths.mean(), 1024.0);
        assert_eq!(pipeline_max_lag(192, 44, &lengths, 128), 132);
        assert_eq!(
            pipeline_max_lag(192, 44, &LengthDistribution::Constant { len: 10 }, 128),
            66
        );
    }

    #[test]
    fn pipeline_validation() {
        let mut s = spec(
            UtilizationCurve::constant(1.0).unwrap(),
            LengthDistribution::Constant { len: 4 },
        );
        s.n_accelerators = 4;
        s.inference_count = 4;
        assert!(pipeline_throughput(&s).is_err());
        s.inference_count = 0;
        assert!(pipeline_throughput(&s).is_err());
    }

    #[test]
    fn flash_rescaling_cancels() {
        let mut s = spec(
            UtilizationCurve::constant(0.3).unwrap(),
            LengthDistribution::Uniform { max_len: 50 },
        );
        s.n_accelerators = 8;
        let r = conv_throughput(&s).unwrap();
        let a = r.tokens_per_second(&FlashScale::new(2e9, 1e15).unwrap());
        let b = r.tokens_per_second(&FlashScale::new(4e9, 2e15).unwrap());
        assert_relative_eq!(a, b, max_relative = 1e-15);
    }
}
