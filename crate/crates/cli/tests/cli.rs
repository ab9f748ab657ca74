use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use inflight_core::protocol::EngineClient;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_inflight"));
    c.env_remove("INFLIGHT_ASSETS");
    c
}

fn assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn inflight")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap())
        .collect()
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let idx = rdr.headers().unwrap().iter().position(|h| h == name).unwrap();
    rdr.records().map(|r| r.unwrap()[idx].to_string()).collect()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn case_study_prints_speedup() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cs");
    let o = run(&["model", "--case-study", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o)
        .lines()
        .find(|l| l.starts_with("speedup:"))
        .unwrap()
        .to_string();
    let speedup: f64 = line["speedup:".len()..].trim().parse().unwrap();
    assert!((1.4..=1.7).contains(&speedup));
    let m = manifest(&out);
    assert_eq!(m["subcommand"], "model");
    assert_eq!(m["outputs"][0], "case_study.csv");
    assert_eq!(csv_rows(&out.join("case_study.csv")).len(), 2);
}

#[test]
fn search_cap_one_matches_hand_enumeration() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("search");
    let cfg = assets().join("model_tiny.toml");
    let o = run(&["model", "--config", s(&cfg), "--out", s(&out), "--search"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let hs = column(&out.join("search.csv"), "gen_batch");
    let is = column(&out.join("search.csv"), "inference_count");
    let mut got: Vec<(u64, u64)> = hs
        .iter()
        .zip(&is)
        .map(|(h, i)| (h.parse().unwrap(), i.parse().unwrap()))
        .collect();
    got.sort();
    // N = 4, B = 8, constant length 4: g_max = ceil(H I / 8) <= 1 iff H I <= 8.
    let mut want = Vec::new();
    for i in 1..4u64 {
        for h in 1..=8u64 {
            if h * i <= 8 {
                want.push((h, i));
            }
        }
    }
    want.sort();
    assert_eq!(got, want);
    assert_eq!(
        column(&out.join("search.csv"), "selected")
            .iter()
            .filter(|x| *x == "true")
            .count(),
        1
    );
}

#[test]
fn speedup_and_pareto_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("m");
    let cfg = assets().join("model_case_study.toml");
    let o = run(&[
        "model",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--speedup-vs-lag",
        "--pareto",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(csv_rows(&out.join("speedup_vs_lag.csv")).len(), 11);
    let modes = column(&out.join("pareto.csv"), "mode");
    assert!(modes.contains(&"pipeline".to_string()) && modes.contains(&"conventional".to_string()));
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn empty_lag_grid_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "m.toml",
        "[cluster]\nn_accelerators = 4\ntrain_batch = 8\ncurve = \"@assets/utilization_curve.csv\"\n\
         lengths = { kind = \"constant\", len = 4 }\n[model]\nlag_grid = []\n",
    );
    let out = tmp.path().join("out");
    let o = run(&["model", "--config", s(&cfg), "--out", s(&out), "--speedup-vs-lag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn missing_curve_names_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "m.toml",
        "[cluster]\nn_accelerators = 4\ntrain_batch = 8\ncurve = \"no_such_curve.csv\"\n\
         lengths = { kind = \"constant\", len = 4 }\n[model]\nlag_cap = 1\n",
    );
    let out = tmp.path().join("out");
    let o = run(&["model", "--config", s(&cfg), "--out", s(&out), "--search"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_curve.csv"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn assets_override_variable() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = bin()
        .args(["model", "--case-study", "--out", s(&out)])
        .env("INFLIGHT_ASSETS", tmp.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model_case_study.toml"));
    assert!(!out.exists());
}

#[test]
fn model_without_flags_or_config_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = assets().join("model_tiny.toml");
    assert_eq!(
        run(&["model", "--config", s(&cfg), "--out", s(&out)]).status.code(),
        Some(2)
    );
    assert_eq!(run(&["model", "--out", s(&out), "--search"]).status.code(), Some(2));
    assert_eq!(run(&["bogus"]).status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn sim_conventional_hand_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sim");
    let cfg = assets().join("sim/conventional_hand_trace.toml");
    let o = run(&["sim", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let phase = column(&out.join("ticks.csv"), "phase");
    let inflight = column(&out.join("ticks.csv"), "in_flight");
    let gen: Vec<&str> = phase
        .iter()
        .zip(&inflight)
        .filter(|(p, _)| *p == "generate")
        .map(|(_, n)| n.as_str())
        .collect();
    assert_eq!(gen, ["4", "3", "2", "1"]);
    let m = manifest(&out);
    for f in ["ticks.csv", "steps.csv", "sequences.csv", "events.jsonl"] {
        assert!(m["outputs"].as_array().unwrap().iter().any(|x| x == f));
    }
}

#[test]
fn sim_pipeline_hand_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sim");
    let cfg = assets().join("sim/pipeline_hand_trace.toml");
    let o = run(&["sim", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let versions = column(&out.join("sequences.csv"), "token_versions");
    let starts = column(&out.join("sequences.csv"), "start_tick");
    // The first sequence generated live starts at tick 0.
    let row = starts.iter().position(|t| t == "0").unwrap();
    let v: Vec<u64> = versions[row].split(';').map(|x| x.parse().unwrap()).collect();
    let b = v[0];
    assert_eq!(v, [b, b, b + 1, b + 1, b + 2, b + 2]);
}

#[test]
fn sim_is_byte_identical_on_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = assets().join("sim/pipeline_toy.toml");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        assert!(run(&["sim", "--config", s(&cfg), "--out", s(d), "--seed", "5"])
            .status
            .success());
    }
    for f in ["ticks.csv", "steps.csv", "sequences.csv", "events.jsonl"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(manifest(&a)["seed"], 5);
    assert_eq!(manifest(&a)["config"]["seed"], 5);
}

#[test]
fn sim_invalid_field_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(assets().join("sim/conventional_hand_trace.toml")).unwrap();
    let bad_mode = write_config(
        tmp.path(),
        "a.toml",
        &text.replace("mode = \"conventional\"", "mode = \"sideways\""),
    );
    let unknown = write_config(tmp.path(), "b.toml", &format!("colour = 3\n{text}"));
    let out = tmp.path().join("out");
    for cfg in [bad_mode, unknown] {
        let o = run(&["sim", "--config", s(&cfg), "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    }
    assert!(!out.exists());
}

#[test]
fn rlcheck_gradcheck_under_tolerance() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("g");
    let cfg = assets().join("rlcheck/gradcheck.toml");
    let o = run(&["rlcheck", "gradcheck", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let n: usize = column(&out.join("gradcheck.csv"), "num_params")[0].parse().unwrap();
    let err: f64 = column(&out.join("gradcheck.csv"), "max_relative_error")[0]
        .parse()
        .unwrap();
    assert!(n <= 100 && err < 1e-4);
    assert_eq!(csv_rows(&out.join("gradient.csv")).len(), n);
}

#[test]
fn rlcheck_mixed_kl_identical_checkpoints_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "k.toml",
        "vocab_size = 5\nhidden_dim = 3\ndrift_magnitude = 0.0\nmax_lag = 4\nmax_len = 16\nsamples = 10\nseed = 2\n\
         conventional_lags = [1, 4]\n",
    );
    let out = tmp.path().join("k");
    let o = run(&["rlcheck", "mixed-kl", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for row in csv_rows(&out.join("kl_curves.csv")) {
        for v in row.iter().skip(1) {
            assert_eq!(v.parse::<f64>().unwrap(), 0.0);
        }
    }
}

#[test]
fn rlcheck_too_few_checkpoints_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "k.toml",
        "vocab_size = 5\nhidden_dim = 3\ndrift_magnitude = 0.1\nmax_lag = 4\nmax_len = 16\nsamples = 10\nseed = 2\n\
         checkpoints = 2\n",
    );
    let out = tmp.path().join("k");
    let o = run(&["rlcheck", "mixed-kl", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checkpoints"));
    assert!(!out.exists());
}

#[test]
fn rlcheck_ess_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("e");
    let cfg = assets().join("rlcheck/ess.toml");
    let o = run(&["rlcheck", "ess", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ess: Vec<f64> = column(&out.join("ess.csv"), "ess")
        .iter()
        .map(|x| x.parse().unwrap())
        .collect();
    assert_eq!(ess[0], 1.0);
    assert!(ess.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(csv_rows(&out.join("weights.csv")).len(), ess.len() * 4 * 64);
}

#[test]
fn drive_without_engine_is_connect_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let cfg = assets().join("protocol/demo_scenario.toml");
    let o = run(&[
        "drive",
        "--config",
        s(&cfg),
        "--engine",
        "127.0.0.1:1",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn serve_then_drive_demo() {
    let tmp = tempfile::tempdir().unwrap();
    let engine_cfg = assets().join("protocol/engine.toml");
    let mut child = bin()
        .args(["serve", "--config", s(&engine_cfg), "--bind", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap().to_string();

    let out = tmp.path().join("d");
    let cfg = assets().join("protocol/demo_scenario.toml");
    let o = run(&["drive", "--config", s(&cfg), "--engine", &addr, "--out", s(&out)]);
    EngineClient::new(addr).shutdown().unwrap();
    assert!(child.wait().unwrap().success());
    assert!(o.status.success(), "{}", stderr(&o));

    let check: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("check.json")).unwrap()).unwrap();
    assert_eq!(check["problems"].as_array().unwrap().len(), 0);
    assert_eq!(check["streams"], 2);
    // The update landed mid-stream on both streams.
    let streams = column(&out.join("tokens.csv"), "stream");
    let versions = column(&out.join("tokens.csv"), "weight_version");
    for label in ["a", "b"] {
        let v: Vec<&str> = streams
            .iter()
            .zip(&versions)
            .filter(|(s, _)| *s == label)
            .map(|(_, v)| v.as_str())
            .collect();
        assert_eq!(v.first(), Some(&"0"));
        assert_eq!(v.last(), Some(&"1"));
    }
}

#[test]
fn loopback_transcripts_replay_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let engine_cfg = assets().join("protocol/engine.toml");
    let cfg = assets().join("protocol/demo_scenario.toml");
    let mut tables = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let o = run(&[
            "drive",
            "--config",
            s(&cfg),
            "--loopback",
            s(&engine_cfg),
            "--out",
            s(&out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        tables.push(std::fs::read(out.join("tokens.csv")).unwrap());
    }
    assert_eq!(tables[0], tables[1]);

    let out = tmp.path().join("c");
    let o = run(&[
        "drive",
        "--config",
        s(&cfg),
        "--loopback",
        s(&engine_cfg),
        "--out",
        s(&out),
        "--seed",
        "40",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_ne!(std::fs::read(out.join("tokens.csv")).unwrap(), tables[0]);
}

#[test]
fn scenario_timeout_exits_four_with_partial_transcript() {
    let tmp = tempfile::tempdir().unwrap();
    let policy = assets().join("policies/demo_v0.json");
    let cfg = write_config(
        tmp.path(),
        "stuck.toml",
        &format!(
            "initial_policy = {:?}\nstep_timeout_ms = 300\n\n[[actions]]\naction = \"start\"\nstream = \"s\"\n\
             prompt_id = 0\nmax_tokens = 10\nseed = 1\ngates = [{{ position = 4, min_version = 9 }}]\n\n\
             [[actions]]\naction = \"await\"\n",
            s(&policy)
        ),
    );
    let engine_cfg = assets().join("protocol/engine.toml");
    let out = tmp.path().join("d");
    let o = run(&[
        "drive",
        "--config",
        s(&cfg),
        "--loopback",
        s(&engine_cfg),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let t: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("transcript.json")).unwrap()).unwrap();
    assert_eq!(t["status"]["status"], "failed");
    assert_eq!(t["streams"][0]["events"].as_array().unwrap().len(), 4);
}
