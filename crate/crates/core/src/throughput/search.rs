//! Exhaustive `(H, I)` search and the datasets built on it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::model::{
    conv_throughput_for_samples, pipeline_max_lag, pipeline_report, ClusterSpec, Mode, ThroughputReport,
};
use crate::error::{Error, Result};

/// Generation batch sizes searched: every integer up to the last curve
/// sample. Beyond it the curve is flat, so larger batches only add lag.
pub fn h_grid(spec: &ClusterSpec) -> Vec<u64> {
    (1..=spec.curve.last_batch_size() as u64).collect()
}

fn check_search_input(spec: &ClusterSpec, cap: u64) -> Result<()> {
    if cap == 0 {
        return Err(Error::invalid("lag cap must be at least 1"));
    }
    if spec.n_accelerators < 2 {
        return Err(Error::invalid("pipeline search needs at least 2 accelerators"));
    }
    if spec.train_batch == 0 || !(spec.tau > 0.0) {
        return Err(Error::invalid("B and tau must be positive"));
    }
    spec.lengths.validate()
}

/// Every `(H, I)` with `g_max <= cap`, in `(I, H)` order.
pub fn feasible_configs(spec: &ClusterSpec, cap: u64) -> Result<Vec<ThroughputReport>> {
    check_search_input(spec, cap)?;
    let grid = h_grid(spec);
    let utils = grid
        .iter()
        .map(|&h| spec.curve.utilization(h as f64, spec.use_padding))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for i in 1..spec.n_accelerators {
        for (&h, &u) in grid.iter().zip(&utils) {
            // g_max is increasing in H, so the rest of this row is infeasible.
            if pipeline_max_lag(h, i, &spec.lengths, spec.train_batch) > cap {
                break;
            }
            out.push(pipeline_report(spec, h, i, u));
        }
    }
    Ok(out)
}

/// `a` beats `b`: higher throughput, then smaller lag, smaller `I`, smaller `H`.
fn better(a: &ThroughputReport, b: &ThroughputReport) -> bool {
    let key = |r: &ThroughputReport| (r.g_max, r.inference_count, r.gen_batch);
    match a.r_total.total_cmp(&b.r_total) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => key(a) < key(b),
    }
}

/// Best pipeline configuration with `g_max <= cap`.
pub fn search_configs(spec: &ClusterSpec, cap: u64) -> Result<ThroughputReport> {
    let mut best: Option<ThroughputReport> = None;
    for r in feasible_configs(spec, cap)? {
        if best.as_ref().is_none_or(|b| better(&r, b)) {
            best = Some(r);
        }
    }
    best.ok_or(Error::Infeasible { cap })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub lag_cap: u64,
    pub r_pipeline: f64,
    pub gen_batch: u64,
    pub inference_count: u64,
    pub pipeline_g_max: u64,
    /// `S = cap * B + 1`, so the conventional sample lag equals the cap
    /// expressed in samples.
    pub conv_samples: u64,
    pub r_conv: f64,
    pub speedup: f64,
}

/// Conventional comparison for a lag cap in optimizer steps.
pub fn conventional_for_cap(spec: &ClusterSpec, cap: u64) -> Result<ThroughputReport> {
    conv_throughput_for_samples(spec, cap * spec.train_batch + 1)
}

pub fn speedup_vs_lag(spec: &ClusterSpec, lag_grid: &[u64]) -> Result<Vec<SpeedupRow>> {
    if lag_grid.is_empty() {
        return Err(Error::invalid("lag grid is empty"));
    }
    lag_grid
        .iter()
        .map(|&cap| {
            let p = search_configs(spec, cap)?;
            let c = conventional_for_cap(spec, cap)?;
            Ok(SpeedupRow {
                lag_cap: cap,
                r_pipeline: p.r_total,
                gen_batch: p.gen_batch.expect("pipeline report"),
                inference_count: p.inference_count.expect("pipeline report"),
                pipeline_g_max: p.g_max,
                conv_samples: c.samples_per_rl_step.expect("conventional report"),
                r_conv: c.r_total,
                speedup: p.r_total / c.r_total,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStudy {
    pub lag_cap: u64,
    pub pipeline: ThroughputReport,
    pub conventional: ThroughputReport,
    pub speedup: f64,
}

pub fn case_study(spec: &ClusterSpec, cap: u64) -> Result<CaseStudy> {
    let pipeline = search_configs(spec, cap)?;
    let conventional = conventional_for_cap(spec, cap)?;
    Ok(CaseStudy {
        lag_cap: cap,
        speedup: pipeline.r_total / conventional.r_total,
        pipeline,
        conventional,
    })
}

/// One configuration of the shared cluster for the throughput/effectiveness
/// trade-off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ConfigPoint {
    Conventional { samples: u64 },
    Pipeline { gen_batch: u64, inference_count: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub mode: Mode,
    pub label: String,
    pub throughput: f64,
    /// Lag in optimizer steps for both modes.
    pub lag_steps: u64,
    pub effectiveness: f64,
    /// Learning speed, throughput times effectiveness.
    pub speed: f64,
    /// No other point has both higher-or-equal throughput and
    /// effectiveness with one strictly higher.
    pub frontier: bool,
}

/// Effectiveness proxy indexed by lag in optimizer steps.
pub type EffectivenessProxy = BTreeMap<u64, f64>;

pub fn pareto_points(
    spec: &ClusterSpec,
    configs: &[ConfigPoint],
    proxy: &EffectivenessProxy,
) -> Result<Vec<ParetoRow>> {
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        let (mode, label, report, lag_steps) = match *cfg {
            ConfigPoint::Conventional { samples } => {
                let r = conv_throughput_for_samples(spec, samples)?;
                let lag = (samples - 1).div_ceil(spec.train_batch);
                (Mode::Conventional, format!("conventional S={samples}"), r, lag)
            }
            ConfigPoint::Pipeline {
                gen_batch,
                inference_count,
            } => {
                let mut s = spec.clone();
                s.gen_batch = gen_batch;
                s.inference_count = inference_count;
                let r = super::model::pipeline_throughput(&s)?;
                let lag = r.g_max;
                (
                    Mode::Pipeline,
                    format!("pipeline H={gen_batch} I={inference_count}"),
                    r,
                    lag,
                )
            }
        };
        let effectiveness = *proxy
            .get(&lag_steps)
            .ok_or_else(|| Error::invalid(format!("effectiveness proxy has no value for lag {lag_steps}")))?;
        rows.push(ParetoRow {
            mode,
            label,
            throughput: report.r_total,
            lag_steps,
            effectiveness,
            speed: report.r_total * effectiveness,
            frontier: false,
        });
    }
    for i in 0..rows.len() {
        let dominated = rows.iter().enumerate().any(|(j, o)| {
            j != i
                && o.throughput >= rows[i].throughput
                && o.effectiveness >= rows[i].effectiveness
                && (o.throughput > rows[i].throughput || o.effectiveness > rows[i].effectiveness)
        });
        rows[i].frontier = !dominated;
    }
    Ok(rows)
}
