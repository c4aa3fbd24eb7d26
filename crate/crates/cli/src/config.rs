//! Settings layering: command-line flags override the TOML config file, which
//! overrides the built-in defaults.

use std::path::Path;

use corridor_planner::mpc::{MpcConfig, ReasonerMode};
use corridor_planner::reasoner::llm::LlmConfig;
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ReasonerKind {
    Rules,
    Llm,
}

/// Suite shape for `batch`, `sweep` and `gen`.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub lanes: usize,
    pub obstacles: usize,
    pub n: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            lanes: 2,
            obstacles: 5,
            n: 100,
        }
    }
}

/// Contents of a `--config` file. Every key is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    /// Step length T [s]; overrides the value stored in scenario files.
    pub dt: Option<f64>,
    pub reasoner: Option<ReasonerKind>,
    /// Adapter settings; required when the reasoner is `llm`.
    pub llm: Option<LlmConfig>,
    pub horizons: Option<Vec<usize>>,
    pub suite: Option<SuiteConfig>,
    /// Any subset of the planner settings.
    pub mpc: Option<MpcConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config file {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("invalid config file {}: {e}", path.display()))
    }
}

/// Planner overrides that may come from flags.
#[derive(Debug, Clone, Default)]
pub struct PlannerFlags {
    pub horizon: Option<usize>,
    pub dt: Option<f64>,
    pub w: [Option<f64>; 4],
    pub reasoner: Option<ReasonerKind>,
}

/// Fully resolved settings.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mpc: MpcConfig,
    /// Step length forced onto loaded scenarios, if given.
    pub dt: Option<f64>,
    pub seed: u64,
    pub suite: SuiteConfig,
    pub horizons: Vec<usize>,
}

pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_HORIZONS: [usize; 4] = [24, 32, 40, 48];

pub fn resolve(file: FileConfig, flags: &PlannerFlags, seed: Option<u64>) -> Result<RunConfig, String> {
    let mut mpc = file.mpc.unwrap_or_default();
    if let Some(k) = flags.horizon {
        mpc.horizon = k;
    }
    let dt = flags.dt.or(file.dt);
    if let Some(t) = dt {
        mpc.limits.dt = t;
    }
    let w = &mut mpc.weights;
    for (slot, v) in [&mut w.w1, &mut w.w2, &mut w.w3, &mut w.w4].into_iter().zip(flags.w) {
        if let Some(v) = v {
            *slot = v;
        }
    }
    let kind = flags.reasoner.or(file.reasoner).unwrap_or(ReasonerKind::Rules);
    mpc.reasoner = match kind {
        ReasonerKind::Rules => ReasonerMode::Rules,
        ReasonerKind::Llm => match file.llm {
            Some(c) => ReasonerMode::Llm(c),
            None => {
                return Err("reasoner `llm` needs an [llm] section (endpoint, model, api_key_env, timeout_s) \
                     in the file passed with --config"
                    .into())
            }
        },
    };
    if let Some(t) = dt {
        if !(t > 0.0 && t.is_finite()) {
            return Err(format!("--dt must be positive, got {t}"));
        }
    }
    mpc.validate().map_err(|e| e.to_string())?;
    Ok(RunConfig {
        mpc,
        dt,
        seed: seed.or(file.seed).unwrap_or(DEFAULT_SEED),
        suite: file.suite.unwrap_or_default(),
        horizons: file.horizons.unwrap_or_else(|| DEFAULT_HORIZONS.to_vec()),
    })
}
