//! Analytical throughput model in flash units.

pub mod curve;
pub mod lengths;
pub mod model;
pub mod search;

pub use curve::{flash_seconds, FlashScale, UtilizationCurve, DEFAULT_PADDING_WINDOW};
pub use lengths::{LengthDistribution, MeanLength};
pub use model::{
    conv_throughput, conv_throughput_for_samples, conv_times, conv_times_for_samples, inflight_profile,
    pipeline_max_lag, pipeline_throughput, ClusterSpec, LagUnit, Mode, ThroughputReport, DEFAULT_TAU,
};
pub use search::{
    case_study, conventional_for_cap, feasible_configs, h_grid, pareto_points, search_configs, speedup_vs_lag,
    CaseStudy, ConfigPoint, EffectivenessProxy, ParetoRow, SpeedupRow,
};
