use std::path::PathBuf;

use anyhow::anyhow;
use inflight_core::config::{load_toml, ModelConfig};
use inflight_core::throughput::{
    case_study, feasible_configs, pareto_points, search_configs, speedup_vs_lag, LagUnit, Mode, ThroughputReport,
};
use serde::Serialize;

use crate::manifest::{assets_dir, path_context, require_out, Failure, Outputs};
use crate::Common;

pub struct Flags {
    pub case_study: bool,
    pub speedup_vs_lag: bool,
    pub pareto: bool,
    pub search: bool,
}

#[derive(Serialize)]
struct ReportRow {
    mode: Mode,
    lag_cap: u64,
    r_gen: f64,
    r_train: f64,
    r_total: f64,
    g_max: u64,
    lag_unit: LagUnit,
    gen_batch: Option<u64>,
    inference_count: Option<u64>,
    samples_per_rl_step: Option<u64>,
    speedup: Option<f64>,
}

impl ReportRow {
    fn new(r: &ThroughputReport, lag_cap: u64, speedup: Option<f64>) -> Self {
        ReportRow {
            mode: r.mode,
            lag_cap,
            r_gen: r.r_gen,
            r_train: r.r_train,
            r_total: r.r_total,
            g_max: r.g_max,
            lag_unit: r.lag_unit,
            gen_batch: r.gen_batch,
            inference_count: r.inference_count,
            samples_per_rl_step: r.samples_per_rl_step,
            speedup,
        }
    }
}

#[derive(Serialize)]
struct SearchRow {
    gen_batch: u64,
    inference_count: u64,
    g_max: u64,
    r_gen: f64,
    r_train: f64,
    r_total: f64,
    selected: bool,
}

pub fn run(common: &Common, flags: Flags) -> Result<(), Failure> {
    if !(flags.case_study || flags.speedup_vs_lag || flags.pareto || flags.search) {
        return Err(Failure::usage(anyhow!(
            "choose at least one of --case-study, --speedup-vs-lag, --pareto, --search"
        )));
    }
    let config_path: PathBuf = match &common.config {
        Some(p) => p.clone(),
        None if flags.case_study => assets_dir().join("model_case_study.toml"),
        None => return Err(Failure::usage(anyhow!("--config is required"))),
    };
    let out = require_out(common)?;
    let mut cfg: ModelConfig = load_toml(&config_path)?;
    let ctx = path_context(&config_path);
    let spec = cfg.cluster.to_spec(&ctx)?;
    cfg.cluster.curve = cfg.cluster.curve_path(&ctx).display().to_string();
    cfg.cluster.tau = Some(spec.tau);
    let lag_cap = || {
        cfg.model
            .lag_cap
            .ok_or_else(|| Failure::usage(anyhow!("[model] lag_cap is required for this flag")))
    };

    let mut outputs = Outputs::new("model");
    if flags.case_study {
        let cap = lag_cap()?;
        let cs = case_study(&spec, cap)?;
        let rows = [
            ReportRow::new(&cs.pipeline, cap, Some(cs.speedup)),
            ReportRow::new(&cs.conventional, cap, None),
        ];
        outputs.add_csv("case_study.csv", &rows)?;
        println!(
            "pipeline: H = {}, I = {}, g_max = {}, r = {:.3} tokens/flash",
            cs.pipeline.gen_batch.unwrap_or(0),
            cs.pipeline.inference_count.unwrap_or(0),
            cs.pipeline.g_max,
            cs.pipeline.r_total
        );
        println!(
            "conventional: S = {}, r = {:.3} tokens/flash",
            cs.conventional.samples_per_rl_step.unwrap_or(0),
            cs.conventional.r_total
        );
        println!("speedup: {:.3}", cs.speedup);
    }
    if flags.speedup_vs_lag {
        let grid = cfg
            .model
            .lag_grid
            .as_deref()
            .ok_or_else(|| Failure::usage(anyhow!("[model] lag_grid is required for --speedup-vs-lag")))?;
        if grid.is_empty() {
            return Err(Failure::usage(anyhow!("[model] lag_grid is empty")));
        }
        let rows = speedup_vs_lag(&spec, grid)?;
        outputs.add_csv("speedup_vs_lag.csv", &rows)?;
    }
    if flags.pareto {
        if cfg.model.pareto.is_empty() {
            return Err(Failure::usage(anyhow!("[model] pareto lists no configurations")));
        }
        let proxy = cfg.model.effectiveness.build(&spec, &cfg.model.pareto)?;
        let rows = pareto_points(&spec, &cfg.model.pareto, &proxy)?;
        outputs.add_csv("pareto.csv", &rows)?;
    }
    if flags.search {
        let cap = lag_cap()?;
        let best = search_configs(&spec, cap)?;
        let rows: Vec<SearchRow> = feasible_configs(&spec, cap)?
            .iter()
            .map(|r| SearchRow {
                gen_batch: r.gen_batch.unwrap_or(0),
                inference_count: r.inference_count.unwrap_or(0),
                g_max: r.g_max,
                r_gen: r.r_gen,
                r_train: r.r_train,
                r_total: r.r_total,
                selected: r.gen_batch == best.gen_batch && r.inference_count == best.inference_count,
            })
            .collect();
        println!(
            "search: {} feasible configurations, best H = {}, I = {}, r = {:.3}",
            rows.len(),
            best.gen_batch.unwrap_or(0),
            best.inference_count.unwrap_or(0),
            best.r_total
        );
        outputs.add_csv("search.csv", &rows)?;
    }
    outputs.write(out, Some(&config_path), &cfg, common.seed)?;
    Ok(())
}
