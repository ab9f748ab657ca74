//! TOML config files for every front end.
//!
//! Relative paths inside a config resolve against the directory holding the
//! config file. A path beginning with `@assets/` resolves against the
//! bundled assets directory instead.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{Action, EngineConfig, Scenario, ScenarioScript};
use crate::rl_math::Policy;
use crate::throughput::{
    pipeline_max_lag, ClusterSpec, ConfigPoint, EffectivenessProxy, LengthDistribution, UtilizationCurve, DEFAULT_TAU,
};

const ASSETS_PREFIX: &str = "@assets/";

/// Where relative paths in a config resolve.
#[derive(Debug, Clone)]
pub struct PathContext {
    pub base_dir: PathBuf,
    pub assets_dir: PathBuf,
}

impl PathContext {
    pub fn for_file(config_path: &Path, assets_dir: &Path) -> Self {
        PathContext {
            base_dir: config_path.parent().map(Path::to_path_buf).unwrap_or_default(),
            assets_dir: assets_dir.to_path_buf(),
        }
    }

    pub fn resolve(&self, raw: &str) -> PathBuf {
        if let Some(rest) = raw.strip_prefix(ASSETS_PREFIX) {
            return self.assets_dir.join(rest);
        }
        let p = Path::new(raw);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn parse_toml<T: DeserializeOwned>(text: &str) -> Result<T> {
    Ok(toml::from_str(text)?)
}

pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_toml(&read_text(path)?).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub n_accelerators: u64,
    pub train_batch: u64,
    #[serde(default = "one")]
    pub steps_per_rl_step: u64,
    #[serde(default)]
    pub gen_batch: u64,
    #[serde(default)]
    pub inference_count: u64,
    /// Defaults to [`DEFAULT_TAU`].
    #[serde(default)]
    pub tau: Option<f64>,
    /// Path to an `h,utilization` CSV.
    pub curve: String,
    #[serde(default)]
    pub padding_window: Option<u32>,
    #[serde(default)]
    pub use_padding: bool,
    pub lengths: LengthDistribution,
}

impl ClusterConfig {
    pub fn curve_path(&self, ctx: &PathContext) -> PathBuf {
        ctx.resolve(&self.curve)
    }

    pub fn to_spec(&self, ctx: &PathContext) -> Result<ClusterSpec> {
        let mut curve = UtilizationCurve::load(&self.curve_path(ctx))?;
        if let Some(w) = self.padding_window {
            curve = curve.with_padding_window(w);
        }
        self.lengths.validate()?;
        Ok(ClusterSpec {
            n_accelerators: self.n_accelerators,
            train_batch: self.train_batch,
            steps_per_rl_step: self.steps_per_rl_step,
            gen_batch: self.gen_batch,
            inference_count: self.inference_count,
            tau: self.tau.unwrap_or(DEFAULT_TAU),
            curve,
            lengths: self.lengths.clone(),
            use_padding: self.use_padding,
        })
    }
}

/// Effectiveness as a function of lag in optimizer steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProxySpec {
    /// `1 / (1 + g / scale)`.
    Hyperbolic {
        #[serde(default = "unit_scale")]
        scale: f64,
    },
    /// Explicit values keyed by lag.
    Table { values: BTreeMap<String, f64> },
}

fn unit_scale() -> f64 {
    1.0
}

impl Default for ProxySpec {
    fn default() -> Self {
        ProxySpec::Hyperbolic { scale: 1.0 }
    }
}

impl ProxySpec {
    /// Materialize the proxy over the lags `configs` produce on `spec`.
    pub fn build(&self, spec: &ClusterSpec, configs: &[ConfigPoint]) -> Result<EffectivenessProxy> {
        match self {
            ProxySpec::Hyperbolic { scale } => {
                if !(*scale > 0.0) {
                    return Err(Error::invalid("hyperbolic proxy scale must be positive"));
                }
                let mut out = BTreeMap::new();
                for c in configs {
                    let g = config_lag(spec, c)?;
                    out.insert(g, 1.0 / (1.0 + g as f64 / scale));
                }
                Ok(out)
            }
            ProxySpec::Table { values } => values
                .iter()
                .map(|(k, &v)| {
                    k.parse::<u64>()
                        .map(|g| (g, v))
                        .map_err(|_| Error::invalid(format!("proxy table key {k:?} is not a lag")))
                })
                .collect(),
        }
    }
}

/// Lag in optimizer steps of one trade-off point.
pub fn config_lag(spec: &ClusterSpec, c: &ConfigPoint) -> Result<u64> {
    match *c {
        ConfigPoint::Conventional { samples } => {
            if samples == 0 || spec.train_batch == 0 {
                return Err(Error::invalid("samples and B must be positive"));
            }
            Ok((samples - 1).div_ceil(spec.train_batch))
        }
        ConfigPoint::Pipeline {
            gen_batch,
            inference_count,
        } => {
            if gen_batch == 0 || inference_count == 0 {
                return Err(Error::invalid("H and I must be positive"));
            }
            Ok(pipeline_max_lag(
                gen_batch,
                inference_count,
                &spec.lengths,
                spec.train_batch,
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Cap for `--case-study` and `--search`.
    #[serde(default)]
    pub lag_cap: Option<u64>,
    /// Caps for `--speedup-vs-lag`.
    #[serde(default)]
    pub lag_grid: Option<Vec<u64>>,
    #[serde(default)]
    pub pareto: Vec<ConfigPoint>,
    #[serde(default)]
    pub effectiveness: ProxySpec,
}

/// `[cluster]` plus `[model]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub cluster: ClusterConfig,
    pub model: ModelSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineFile {
    #[serde(default = "default_bind")]
    pub bind: String,
    /// Policy document served at version 0.
    pub policy: String,
    #[serde(default)]
    pub recompute_state: bool,
    #[serde(default)]
    pub round_delay_us: u64,
}

fn default_bind() -> String {
    "127.0.0.1:7878".into()
}

impl EngineFile {
    pub fn to_engine_config(&self, ctx: &PathContext) -> Result<EngineConfig> {
        let policy = Policy::load(&ctx.resolve(&self.policy))?;
        let mut cfg = EngineConfig::new(policy);
        cfg.bind = self.bind.clone();
        cfg.recompute_state = self.recompute_state;
        cfg.round_delay = Duration::from_micros(self.round_delay_us);
        Ok(cfg)
    }
}

fn default_timeout_ms() -> u64 {
    ScenarioScript::default().step_timeout_ms
}

/// A scenario script with its checkpoints given as policy-document paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    /// Policy the engine serves when the script starts; enables offline
    /// verification of the transcript.
    #[serde(default)]
    pub initial_policy: Option<String>,
    #[serde(default)]
    pub checkpoints: Vec<String>,
    #[serde(default = "default_timeout_ms")]
    pub step_timeout_ms: u64,
    #[serde(default)]
    pub actions: Vec<Action>,
}

impl ScenarioFile {
    pub fn to_scenario(&self, ctx: &PathContext) -> Result<Scenario> {
        let checkpoints = self
            .checkpoints
            .iter()
            .map(|p| Policy::load(&ctx.resolve(p)))
            .collect::<Result<Vec<_>>>()?;
        for a in &self.actions {
            if let Action::Update { checkpoint, .. } = a {
                if *checkpoint >= checkpoints.len() {
                    return Err(Error::invalid(format!(
                        "update refers to checkpoint {checkpoint} but only {} are listed",
                        checkpoints.len()
                    )));
                }
            }
        }
        Ok(Scenario {
            script: ScenarioScript {
                step_timeout_ms: self.step_timeout_ms,
                actions: self.actions.clone(),
            },
            checkpoints,
        })
    }

    pub fn initial_policy(&self, ctx: &PathContext) -> Result<Option<Policy>> {
        self.initial_policy
            .as_deref()
            .map(|p| Policy::load(&ctx.resolve(p)))
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolves_relative_and_asset_paths() {
        let ctx = PathContext::for_file(Path::new("/a/b/c.toml"), Path::new("/assets"));
        assert_eq!(ctx.resolve("x.csv"), PathBuf::from("/a/b/x.csv"));
        assert_eq!(ctx.resolve("@assets/x.csv"), PathBuf::from("/assets/x.csv"));
        assert_eq!(ctx.resolve("/abs/x.csv"), PathBuf::from("/abs/x.csv"));
    }

    #[test]
    fn model_file_shape() {
        let text = r#"
[cluster]
n_accelerators = 8
train_batch = 4
curve = "curve.csv"
lengths = { kind = "uniform", max_len = 16 }

[model]
lag_cap = 3
lag_grid = [1, 2]
pareto = [
  { mode = "conventional", samples = 9 },
  { mode = "pipeline", gen_batch = 2, inference_count = 1 },
]
effectiveness = { kind = "table", values = { "2" = 0.5 } }
"#;
        let cfg: ModelConfig = parse_toml(text).unwrap();
        assert_eq!(cfg.cluster.steps_per_rl_step, 1);
        assert_eq!(cfg.cluster.tau, None);
        assert_eq!(cfg.model.pareto.len(), 2);
        assert!(parse_toml::<ModelConfig>(&text.replace("lag_cap", "lag_kap")).is_err());
    }

    #[test]
    fn hyperbolic_proxy_values() {
        let spec = ClusterSpec {
            n_accelerators: 4,
            train_batch: 4,
            steps_per_rl_step: 1,
            gen_batch: 0,
            inference_count: 0,
            tau: 1.0,
            curve: UtilizationCurve::constant(0.5).unwrap(),
            lengths: LengthDistribution::Constant { len: 4 },
            use_padding: false,
        };
        let configs = [
            ConfigPoint::Conventional { samples: 9 },
            ConfigPoint::Conventional { samples: 1 },
        ];
        let proxy = ProxySpec::default().build(&spec, &configs).unwrap();
        assert_eq!(proxy[&2], 1.0 / 3.0);
        assert_eq!(proxy[&0], 1.0);
    }
}
