use std::io::Write;
use std::path::Path;

use anyhow::anyhow;
use inflight_core::config::{load_toml, EngineFile, ScenarioFile};
use inflight_core::protocol::{
    drive_scenario, serve_engine, verify_transcript, Action, EngineClient, EngineHandle, ScenarioStatus,
};
use serde::Serialize;

use crate::manifest::{path_context, require_config, require_out, Failure, Outputs, EXIT_CONNECT};
use crate::Common;

fn start_engine(file: &EngineFile, config_path: &Path, bind: Option<String>) -> Result<EngineHandle, Failure> {
    let mut cfg = file.to_engine_config(&path_context(config_path))?;
    if let Some(b) = bind {
        cfg.bind = b;
    }
    serve_engine(cfg).map_err(|e| match e {
        inflight_core::Error::Bind { .. } => Failure {
            code: EXIT_CONNECT,
            error: e.into(),
        },
        other => other.into(),
    })
}

pub fn serve(common: &Common, bind: Option<String>) -> Result<(), Failure> {
    let config_path = require_config(common)?;
    let mut file: EngineFile = load_toml(config_path)?;
    let handle = start_engine(&file, config_path, bind)?;
    let addr = handle.addr();
    file.bind = addr.to_string();
    println!("listening on {addr}");
    let _ = std::io::stdout().flush();
    if let Some(out) = &common.out {
        Outputs::new("serve").write(out, Some(config_path), &file, common.seed)?;
    }
    handle.wait();
    Ok(())
}

#[derive(Serialize)]
struct TokenRow<'a> {
    stream: &'a str,
    stream_id: u64,
    position: u64,
    token: u32,
    logprob: f64,
    weight_version: u64,
}

#[derive(Serialize)]
struct DriveSnapshot<'a> {
    engine: String,
    loopback: Option<&'a EngineFile>,
    scenario: &'a ScenarioFile,
}

pub fn drive(common: &Common, engine: &str, loopback: Option<&Path>) -> Result<(), Failure> {
    let config_path = require_config(common)?;
    let out = require_out(common)?;
    let mut file: ScenarioFile = load_toml(config_path)?;
    if let Some(seed) = common.seed {
        let mut k = 0;
        for a in file.actions.iter_mut() {
            if let Action::Start { seed: s, .. } = a {
                *s = seed.wrapping_add(k);
                k += 1;
            }
        }
    }
    let ctx = path_context(config_path);
    let scenario = file.to_scenario(&ctx)?;
    let initial = file.initial_policy(&ctx)?;

    let engine_file: Option<EngineFile> = loopback.map(load_toml).transpose()?;
    let local = match (&engine_file, loopback) {
        (Some(f), Some(path)) => Some(start_engine(f, path, Some("127.0.0.1:0".into()))?),
        _ => None,
    };
    let addr = local
        .as_ref()
        .map_or_else(|| engine.to_string(), |h| h.addr().to_string());

    let health = EngineClient::new(addr.clone()).health()?;
    let transcript = drive_scenario(&addr, &scenario)?;
    drop(local);

    let mut outputs = Outputs::new("drive");
    outputs.add(
        "transcript.json",
        serde_json::to_vec_pretty(&transcript).map_err(anyhow::Error::from)?,
    );
    let rows: Vec<TokenRow> = transcript
        .streams
        .iter()
        .flat_map(|s| {
            s.events.iter().map(move |e| TokenRow {
                stream: &s.label,
                stream_id: e.stream_id,
                position: e.position,
                token: e.token,
                logprob: e.logprob,
                weight_version: e.weight_version,
            })
        })
        .collect();
    outputs.add_csv("tokens.csv", &rows)?;
    let mut log = Vec::new();
    for entry in &transcript.engine_log {
        serde_json::to_writer(&mut log, entry).map_err(anyhow::Error::from)?;
        log.push(b'\n');
    }
    outputs.add("engine_log.jsonl", log);

    let mut problems = Vec::new();
    if let Some(initial) = &initial {
        let policies = transcript.policies_by_version(initial, &scenario.checkpoints);
        let check = verify_transcript(&transcript, &policies, health.recompute_state);
        outputs.add(
            "check.json",
            serde_json::to_vec_pretty(&check).map_err(anyhow::Error::from)?,
        );
        println!(
            "verified {} events on {} streams: {}",
            check.events,
            check.streams,
            if check.ok() { "ok" } else { "FAILED" }
        );
        problems = check.problems;
    }
    for s in &transcript.streams {
        let versions = s.versions();
        println!(
            "stream {}: {} tokens, versions {}..={}",
            s.label,
            s.events.len(),
            versions.first().copied().unwrap_or(0),
            versions.last().copied().unwrap_or(0)
        );
    }

    let snapshot = DriveSnapshot {
        engine: addr,
        loopback: engine_file.as_ref(),
        scenario: &file,
    };
    outputs.write(out, Some(config_path), &snapshot, common.seed)?;
    if let ScenarioStatus::Failed { step, reason } = &transcript.status {
        return Err(Failure::scenario(anyhow!("scenario step {step} failed: {reason}")));
    }
    if !problems.is_empty() {
        return Err(Failure::scenario(anyhow!(
            "transcript check failed: {}",
            problems.join("; ")
        )));
    }
    Ok(())
}
