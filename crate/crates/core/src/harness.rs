//! Experiment configuration, seed fan-out and artifact emission.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{discretize_env, mc_estimate, run_cem, CemConfig, Discretizer};
use crate::env::{Environment, GamblersRuin, GridworldLava, Intersection2d, Lander1d};
use crate::error::{Error, Result};
use crate::report::{
    ConvergenceDetector, EstimatorReport, ReportRow, RunSummary, DEFAULT_RARE_WINDOW,
};
use crate::scalable::{run_scalable_ape, ScalableConfig};
use crate::tabular::{run_tabular_ape, TabularConfig};

/// Environment variable capping the number of seeds run concurrently.
pub const THREADS_VAR: &str = "RAREVAL_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntersectionPreset {
    Easy,
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnvConfig {
    GamblersRuin {
        n: usize,
        p: f64,
        #[serde(default)]
        start: Option<usize>,
        #[serde(default)]
        max_steps: Option<usize>,
    },
    GridworldLava {
        #[serde(default = "default_width")]
        width: usize,
        #[serde(default)]
        lava_start: usize,
        #[serde(default)]
        max_steps: Option<usize>,
    },
    #[serde(rename = "intersection-2d")]
    Intersection2d {
        #[serde(default = "default_preset")]
        preset: IntersectionPreset,
        #[serde(default)]
        max_steps: Option<usize>,
    },
    #[serde(rename = "lander-1d")]
    Lander1d {
        #[serde(default = "default_crash_speed")]
        crash_speed: f64,
        #[serde(default = "default_noise_std")]
        noise_std: f64,
        #[serde(default)]
        max_steps: Option<usize>,
    },
}

fn default_width() -> usize {
    7
}

fn default_preset() -> IntersectionPreset {
    IntersectionPreset::Easy
}

fn default_crash_speed() -> f64 {
    0.26
}

fn default_noise_std() -> f64 {
    0.1
}

impl EnvConfig {
    pub fn build(&self) -> Result<Arc<dyn Environment>> {
        Ok(match self {
            EnvConfig::GamblersRuin { n, p, start, max_steps } => {
                let mut env = GamblersRuin::new(*n, *p)?;
                if let Some(s) = start {
                    env = env.with_start(*s)?;
                }
                if let Some(m) = max_steps {
                    env = env.with_max_steps(*m);
                }
                Arc::new(env)
            }
            EnvConfig::GridworldLava {
                width,
                lava_start,
                max_steps,
            } => {
                let mut env = GridworldLava::new(*width, *lava_start)?;
                if let Some(m) = max_steps {
                    env = env.with_max_steps(*m);
                }
                Arc::new(env)
            }
            EnvConfig::Intersection2d { preset, max_steps } => {
                let mut env = match preset {
                    IntersectionPreset::Easy => Intersection2d::easy(),
                    IntersectionPreset::Hard => Intersection2d::hard(),
                };
                if let Some(m) = max_steps {
                    env = env.with_max_steps(*m);
                }
                Arc::new(env)
            }
            EnvConfig::Lander1d {
                crash_speed,
                noise_std,
                max_steps,
            } => {
                let mut env = Lander1d::new(*crash_speed, *noise_std)?;
                if let Some(m) = max_steps {
                    env = env.with_max_steps(*m);
                }
                Arc::new(env)
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum MethodConfig {
    Mc {
        budget_episodes: u64,
    },
    CemDiscrete(CemConfig),
    ApeDiscrete(TabularConfig),
    ApeScalable(ScalableConfig),
}

impl MethodConfig {
    pub fn name(&self) -> &'static str {
        match self {
            MethodConfig::Mc { .. } => "mc",
            MethodConfig::CemDiscrete(_) => "cem_discrete",
            MethodConfig::ApeDiscrete(_) => "ape_discrete",
            MethodConfig::ApeScalable(_) => "ape_scalable",
        }
    }

    fn is_discrete(&self) -> bool {
        matches!(self, MethodConfig::CemDiscrete(_) | MethodConfig::ApeDiscrete(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    /// Trailing window in steps.
    pub window: usize,
    /// Relative spread tolerance.
    pub tolerance: f64,
    /// Trailing window in episodes for the sampled rare-event rate.
    pub rare_window: usize,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig {
            window: 2000,
            tolerance: 0.01,
            rare_window: DEFAULT_RARE_WINDOW,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub method: MethodConfig,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub convergence: ConvergenceConfig,
    /// Grids for running a discrete method on a continuous environment.
    #[serde(default)]
    pub discretize: Option<Discretizer>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<root>", e.to_string()))?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        let distinct: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return Err(Error::config("seeds", "seeds must be distinct"));
        }
        if self.convergence.window == 0 || !(self.convergence.tolerance > 0.0) || self.convergence.rare_window == 0 {
            return Err(Error::config("convergence", "window, tolerance and rare_window must be positive"));
        }
        let at = |field: &str| format!("method.{field}");
        match &self.method {
            MethodConfig::Mc { budget_episodes } if *budget_episodes == 0 => {
                return Err(Error::config(at("budget_episodes"), "must be positive"));
            }
            MethodConfig::CemDiscrete(c) if c.batch == 0 => {
                return Err(Error::config(at("batch"), "must be positive"));
            }
            MethodConfig::ApeDiscrete(c) => c
                .schedule
                .validate()
                .and_then(|_| c.exploration.validate())
                .map_err(|e| Error::config("method", e.to_string()))?,
            MethodConfig::ApeScalable(c) => c.validate().map_err(|e| Error::config("method", e.to_string()))?,
            _ => {}
        }
        if self.discretize.is_some() && !self.method.is_discrete() {
            return Err(Error::config("discretize", "only discrete methods use a grid"));
        }
        Ok(())
    }
}

/// Table-style aggregate over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub method: String,
    pub env: String,
    pub seeds: Vec<u64>,
    pub mean_final_estimate: f64,
    pub std_final_estimate: f64,
    /// Means over runs of transitions / episodes to convergence (run
    /// totals for runs that never converged).
    pub mean_transitions: f64,
    pub mean_episodes: f64,
    pub mean_final_rare_rate: f64,
    pub converged_runs: usize,
    pub runs: Vec<RunSummary>,
}

impl ExperimentSummary {
    pub fn from_runs(method: &str, env: &str, runs: Vec<RunSummary>) -> Self {
        let n = runs.len().max(1) as f64;
        let mean = |f: &dyn Fn(&RunSummary) -> f64| runs.iter().map(f).sum::<f64>() / n;
        let m = mean(&|r| r.final_estimate);
        let var = if runs.len() > 1 {
            runs.iter().map(|r| (r.final_estimate - m).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        ExperimentSummary {
            method: method.to_string(),
            env: env.to_string(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            mean_final_estimate: m,
            std_final_estimate: var.sqrt(),
            mean_transitions: mean(&|r| r.transitions as f64),
            mean_episodes: mean(&|r| r.episodes as f64),
            mean_final_rare_rate: mean(&|r| r.final_rare_rate),
            converged_runs: runs.iter().filter(|r| r.convergence_step.is_some()).count(),
            runs,
        }
    }
}

/// Rebuilds a run summary from emitted CSV rows by replaying the
/// convergence detector.
pub fn summarize_rows(method: &str, env: &str, seed: u64, rows: &[ReportRow], conv: &ConvergenceConfig) -> RunSummary {
    let mut det = ConvergenceDetector::new(conv.window, conv.tolerance);
    let mut at = None;
    for r in rows {
        if at.is_none() && det.observe(r.step, r.estimate).is_some() {
            at = Some((r.step, r.episode));
        }
    }
    let last = rows.last();
    RunSummary {
        method: method.to_string(),
        env: env.to_string(),
        seed,
        final_estimate: last.map_or(0.0, |r| r.estimate),
        convergence_step: at.map(|a| a.0),
        transitions: at.map_or(last.map_or(0, |r| r.step), |a| a.0),
        episodes: at.map_or(last.map_or(0, |r| r.episode), |a| a.1),
        final_rare_rate: last.map_or(0.0, |r| r.rare_rate),
    }
}

pub struct ExperimentOutcome {
    pub reports: Vec<EstimatorReport>,
    pub summary: ExperimentSummary,
}

fn thread_cap(seeds: usize) -> usize {
    let cap = std::env::var(THREADS_VAR)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(rayon::current_num_threads);
    cap.min(seeds).max(1)
}

fn run_seed(cfg: &ExperimentConfig, env: &dyn Environment, seed: u64) -> Result<EstimatorReport> {
    let conv = &cfg.convergence;
    let sink = crate::report::ReportSink::new(
        cfg.method.name(),
        &env.name(),
        seed,
        ConvergenceDetector::new(conv.window, conv.tolerance),
    )
    .with_rare_window(conv.rare_window);
    match &cfg.method {
        MethodConfig::Mc { budget_episodes } => mc_estimate(env, *budget_episodes, seed, sink),
        MethodConfig::CemDiscrete(c) => run_cem(env, c, seed, sink),
        MethodConfig::ApeDiscrete(c) => run_tabular_ape(env, c, seed, sink),
        MethodConfig::ApeScalable(c) => run_scalable_ape(env, c, seed, sink).map(|run| run.report),
    }
}

/// Runs every seed (concurrently, capped by `RAREVAL_THREADS`) and writes
/// per-seed CSV and JSON plus `summary.json` when an output directory is
/// configured.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let inner = cfg.env.build()?;
    let env: Arc<dyn Environment> = match (&cfg.discretize, cfg.method.is_discrete()) {
        (Some(grid), true) => Arc::new(discretize_env(inner, grid.clone())?),
        _ => inner,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap(cfg.seeds.len()))
        .build()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
    let reports: Vec<EstimatorReport> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|seed| run_seed(cfg, env.as_ref(), *seed))
            .collect::<Result<Vec<_>>>()
    })?;
    let summary = ExperimentSummary::from_runs(
        cfg.method.name(),
        &env.name(),
        reports.iter().map(EstimatorReport::summary).collect(),
    );
    if let Some(dir) = &cfg.output_dir {
        write_artifacts(dir, &reports, &summary)?;
    }
    Ok(ExperimentOutcome { reports, summary })
}

pub fn artifact_stem(report: &EstimatorReport) -> String {
    format!("{}_{}_seed{}", report.method, report.env, report.seed)
}

pub fn write_artifacts(dir: &Path, reports: &[EstimatorReport], summary: &ExperimentSummary) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in reports {
        let stem = artifact_stem(r);
        r.write_csv(&dir.join(format!("{stem}.csv")))?;
        r.write_summary_json(&dir.join(format!("{stem}.json")))?;
    }
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(summary).expect("summary serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
