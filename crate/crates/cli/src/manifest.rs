use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use inflight_core::config::PathContext;
use serde::Serialize;

use crate::Common;

pub const ASSETS_ENV: &str = "INFLIGHT_ASSETS";

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CONNECT: u8 = 3;
pub const EXIT_SCENARIO: u8 = 4;

/// An error together with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: EXIT_USAGE,
            error: error.into(),
        }
    }

    pub fn scenario(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: EXIT_SCENARIO,
            error: error.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = error
            .chain()
            .find_map(|e| match e.downcast_ref::<inflight_core::Error>() {
                Some(inflight_core::Error::Connect { .. }) => Some(EXIT_CONNECT),
                Some(inflight_core::Error::Timeout { .. }) => Some(EXIT_SCENARIO),
                _ => None,
            })
            .unwrap_or(EXIT_USAGE);
        Failure { code, error }
    }
}

impl From<inflight_core::Error> for Failure {
    fn from(e: inflight_core::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

pub fn assets_dir() -> PathBuf {
    match std::env::var_os(ASSETS_ENV) {
        Some(dir) => PathBuf::from(dir),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets"),
    }
}

pub fn path_context(config: &Path) -> PathContext {
    PathContext::for_file(config, &assets_dir())
}

pub fn require_config(common: &Common) -> Result<&Path, Failure> {
    common
        .config
        .as_deref()
        .ok_or_else(|| Failure::usage(anyhow!("--config is required")))
}

pub fn require_out(common: &Common) -> Result<&Path, Failure> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Failure::usage(anyhow!("--out is required")))
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_path: Option<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub version: String,
    pub outputs: Vec<String>,
    pub duration_seconds: f64,
}

/// Output files held in memory until the run has fully succeeded, so that
/// a failing run leaves nothing behind.
pub struct Outputs {
    subcommand: String,
    started: Instant,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn new(subcommand: &str) -> Self {
        Outputs {
            subcommand: subcommand.into(),
            started: Instant::now(),
            files: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn add_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> anyhow::Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        self.add(name, w.into_inner().context("flushing csv")?);
        Ok(())
    }

    /// Write every file and then `manifest.json` into `dir`.
    pub fn write(
        self,
        dir: &Path,
        config_path: Option<&Path>,
        config: &impl Serialize,
        seed: Option<u64>,
    ) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut names = Vec::new();
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
            names.push(name.clone());
        }
        let manifest = RunManifest {
            subcommand: self.subcommand,
            config_path: config_path.map(|p| p.display().to_string()),
            config: serde_json::to_value(config)?,
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            outputs: names,
            duration_seconds: self.started.elapsed().as_secs_f64(),
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
