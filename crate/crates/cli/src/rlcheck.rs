use std::path::Path;

use anyhow::anyhow;
use inflight_core::config::load_toml;
use inflight_core::rl_math::experiments::{
    ess_study, grad_check, mixed_kl_study, EssStudyConfig, GradCheckConfig, MixedKlConfig,
};
use serde::Serialize;

use crate::manifest::{require_config, require_out, Failure, Outputs};
use crate::{Common, Experiment};

pub fn run(experiment: Experiment, common: &Common) -> Result<(), Failure> {
    let config_path = require_config(common)?;
    let out = require_out(common)?;
    let mut outputs = Outputs::new(&format!("rlcheck {}", experiment.name()));
    match experiment {
        Experiment::Ess => {
            let mut cfg: EssStudyConfig = load_toml(config_path)?;
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            let study = ess_study(&cfg)?;
            outputs.add_csv("weights.csv", &study.weights)?;
            outputs.add_csv("ess.csv", &study.rows)?;
            for r in &study.rows {
                println!("drift {:>8.4}: ESS {:.4}", r.magnitude, r.ess);
            }
            finish(outputs, out, config_path, &cfg, cfg.seed)
        }
        Experiment::Gradcheck => {
            let mut cfg: GradCheckConfig = load_toml(config_path)?;
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            let report = grad_check(&cfg)?;
            #[derive(Serialize)]
            struct Row {
                param: usize,
                analytic: f64,
                finite_difference: f64,
            }
            let rows: Vec<Row> = report
                .analytic
                .iter()
                .zip(&report.finite_difference)
                .enumerate()
                .map(|(param, (&analytic, &finite_difference))| Row {
                    param,
                    analytic,
                    finite_difference,
                })
                .collect();
            outputs.add_csv("gradient.csv", &rows)?;
            #[derive(Serialize)]
            struct Summary {
                num_params: usize,
                max_relative_error: f64,
            }
            outputs.add_csv(
                "gradcheck.csv",
                &[Summary {
                    num_params: report.num_params,
                    max_relative_error: report.max_relative_error,
                }],
            )?;
            println!(
                "{} parameters, max relative error {:.3e}",
                report.num_params, report.max_relative_error
            );
            finish(outputs, out, config_path, &cfg, cfg.seed)
        }
        Experiment::MixedKl => {
            let mut cfg: MixedKlConfig = load_toml(config_path)?;
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            let report = mixed_kl_study(&cfg)?;
            let mut curves = vec![&report.mixed_stale, &report.mixed_recomputed];
            curves.extend(report.conventional.iter().map(|(_, c)| c));

            let len = curves.iter().map(|c| c.per_position.len()).max().unwrap_or(0);
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["position".to_string()];
            header.extend(curves.iter().map(|c| c.label.clone()));
            w.write_record(&header).map_err(anyhow::Error::from)?;
            for t in 0..len {
                let mut rec = vec![t.to_string()];
                rec.extend(
                    curves
                        .iter()
                        .map(|c| c.per_position.get(t).map(|v| v.to_string()).unwrap_or_default()),
                );
                w.write_record(&rec).map_err(anyhow::Error::from)?;
            }
            let bytes = w.into_inner().map_err(|e| anyhow!("flushing csv: {e}"))?;
            outputs.add("kl_curves.csv", bytes);

            #[derive(Serialize)]
            struct Summary<'a> {
                curve: &'a str,
                mean_kl: f64,
            }
            let summary: Vec<Summary> = curves
                .iter()
                .map(|c| Summary {
                    curve: &c.label,
                    mean_kl: c.mean,
                })
                .collect();
            outputs.add_csv("kl_summary.csv", &summary)?;
            for s in &summary {
                println!("{:<24} mean KL {:.6}", s.curve, s.mean_kl);
            }
            println!("stale minus recomputed: {:.3e}", report.stale_gap());
            finish(outputs, out, config_path, &cfg, cfg.seed)
        }
    }
}

fn finish(outputs: Outputs, out: &Path, config_path: &Path, cfg: &impl Serialize, seed: u64) -> Result<(), Failure> {
    outputs.write(out, Some(config_path), cfg, Some(seed))?;
    Ok(())
}
