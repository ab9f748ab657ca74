use inflight_core::config::load_toml;
use inflight_core::sim::{mean, replay, SimConfig};

use crate::manifest::{require_config, require_out, Failure, Outputs};
use crate::Common;

pub fn run(common: &Common) -> Result<(), Failure> {
    let config_path = require_config(common)?;
    let out = require_out(common)?;
    let mut cfg: SimConfig = load_toml(config_path)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let trace = replay(&cfg)?;

    let mut outputs = Outputs::new("sim");
    let mut buf = Vec::new();
    trace.write_ticks_csv(&mut buf)?;
    outputs.add("ticks.csv", buf);
    let mut buf = Vec::new();
    trace.write_steps_csv(&mut buf)?;
    outputs.add("steps.csv", buf);
    let mut buf = Vec::new();
    trace.write_sequences_csv(&mut buf)?;
    outputs.add("sequences.csv", buf);
    let mut buf = Vec::new();
    trace.write_event_log(&mut buf)?;
    outputs.add("events.jsonl", buf);

    let last_tick = trace.ticks.last().map_or(0, |t| t.tick);
    println!(
        "{} mode: {} optimizer steps in {} ticks",
        cfg.mode,
        trace.steps.len(),
        last_tick + 1
    );
    let ess: Vec<f64> = trace.steps.iter().filter_map(|s| s.ess).collect();
    if !ess.is_empty() {
        println!("mean batch ESS: {:.4}", mean(&ess));
    }
    outputs.write(out, Some(config_path), &cfg, Some(cfg.seed))?;
    Ok(())
}
