//! Batch experiment driver behind the `pept` binary.
//!
//! # Configuration
//!
//! One JSON document; every field is optional except that at least one
//! controller must be named (in the file or with `--controllers`).
//!
//! ```json
//! {
//!   "task": "easy",
//!   "controllers": ["RTI-40", "PT-10-20-4", "PEPT-10-20-2", "PPO-RL"],
//!   "episodes": 100,
//!   "seed": 0,
//!   "out": "results",
//!   "weights": "policy.json",
//!   "quad": { "mass": 0.02697, "inertia": [1.4e-5, 1.4e-5, 2.17e-5] },
//!   "plant_mismatch": 1.0
//! }
//! ```
//!
//! `task` is `easy` (α = 0.8) or `hard` (α = 1.0). Episode `i` uses seed
//! `seed + i`. `quad` overrides the quadcopter parameters of both the
//! prediction model and the plant; `plant_mismatch` scales mass and inertia of
//! the plant only. Without `weights`, controllers that need a policy use the
//! hover LQR stand-in.
//!
//! # Output
//!
//! * `episodes.csv`: `controller,seed,tracking_cost,violation_cost,mean_runtime_ms,mean_feedback_ms,failures`
//!   with `failures` counting failed steps of the episode.
//! * `summary.csv`: per-controller means and standard deviations, failure percentage.
//! * `plotdata.csv`: `controller,tracking_cost,violation_cost,total_cost`.
//! * `trajectories.csv`: every closed-loop sample, one row per step.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use pept_core::quadcopter::{benchmark_ocp, N_U, N_X};
use pept_core::sim::{build_controller, hover_lqr, run_batch, summarize, Summary};
use pept_core::{
    ControllerConfig, EpisodeResult, OcpSpec, Policy, PolicyNet, QuadParams, Quadcopter, Task,
};

pub const EPISODES_HEADER: [&str; 7] = [
    "controller",
    "seed",
    "tracking_cost",
    "violation_cost",
    "mean_runtime_ms",
    "mean_feedback_ms",
    "failures",
];

pub const SUMMARY_HEADER: [&str; 11] = [
    "controller",
    "episodes",
    "tracking_cost",
    "tracking_cost_std",
    "violation_cost",
    "violation_cost_std",
    "mean_runtime_ms",
    "mean_runtime_ms_std",
    "mean_feedback_ms",
    "mean_feedback_ms_std",
    "failure_pct",
];

pub const PLOTDATA_HEADER: [&str; 4] = [
    "controller",
    "tracking_cost",
    "violation_cost",
    "total_cost",
];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("run failed: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: String,
    pub controllers: Vec<String>,
    pub episodes: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub weights: Option<PathBuf>,
    pub quad: QuadParams,
    pub plant_mismatch: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: "easy".into(),
            controllers: Vec::new(),
            episodes: 100,
            seed: 0,
            out: PathBuf::from("results"),
            weights: None,
            quad: QuadParams::default(),
            plant_mismatch: 1.0,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub task: Option<String>,
    pub episodes: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub controllers: Option<Vec<String>>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(config_err)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn apply(&mut self, o: Overrides) {
        if let Some(v) = o.task {
            self.task = v;
        }
        if let Some(v) = o.episodes {
            self.episodes = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.out {
            self.out = v;
        }
        if let Some(v) = o.weights {
            self.weights = Some(v);
        }
        if let Some(v) = o.controllers {
            self.controllers = v;
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.episodes as u64)
            .map(|i| self.seed.wrapping_add(i))
            .collect()
    }

    /// Checks every field and resolves the controller identifiers.
    pub fn validate(&self) -> Result<(Task, Vec<ControllerConfig>), CliError> {
        let task = Task::from_name(&self.task).map_err(config_err)?;
        if self.episodes == 0 {
            return Err(config_err("episodes must be at least 1"));
        }
        if self.controllers.is_empty() {
            return Err(config_err("no controllers given"));
        }
        let controllers = self
            .controllers
            .iter()
            .map(|id| ControllerConfig::parse(id.trim()).map_err(config_err))
            .collect::<Result<Vec<_>, _>>()?;
        self.quad.validate().map_err(config_err)?;
        if !(self.plant_mismatch > 0.0 && self.plant_mismatch.is_finite()) {
            return Err(config_err(format!(
                "plant_mismatch must be positive, got {}",
                self.plant_mismatch
            )));
        }
        Ok((task, controllers))
    }
}

/// Loads the weight file if one is configured. With no file, controllers that
/// need a policy get the hover LQR.
pub fn load_policy(
    cfg: &ExperimentConfig,
    controllers: &[ControllerConfig],
    base: &OcpSpec,
    quad: &Quadcopter,
) -> Result<Option<Arc<dyn Policy>>, CliError> {
    if !controllers.iter().any(|c| c.kind.needs_policy()) {
        return Ok(None);
    }
    match &cfg.weights {
        Some(path) => {
            if !path.is_file() {
                return Err(CliError::Config(format!(
                    "weight file {} not found",
                    path.display()
                )));
            }
            let net = PolicyNet::load_weights(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            if net.n_x() != N_X || net.n_u() != N_U {
                return Err(CliError::Config(format!(
                    "{}: policy maps {} states to {} controls, the quadcopter needs {N_X} to {N_U}",
                    path.display(),
                    net.n_x(),
                    net.n_u()
                )));
            }
            Ok(Some(Arc::new(net)))
        }
        None => {
            warn!("no weight file given, using the hover LQR policy");
            let lqr = hover_lqr(base, quad).map_err(runtime_err)?;
            Ok(Some(Arc::new(lqr)))
        }
    }
}

#[derive(Debug)]
pub struct RunOutput {
    pub results: Vec<EpisodeResult>,
    pub summaries: Vec<Summary>,
}

/// Runs every controller over the configured seeds and writes the CSV files.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let (task, controllers) = cfg.validate()?;
    let quad = Quadcopter::new(cfg.quad.clone()).map_err(config_err)?;
    let plant = Quadcopter::new(cfg.quad.scaled(cfg.plant_mismatch)).map_err(config_err)?;
    let base = benchmark_ocp(10, 20, 1e-2);
    let policy = load_policy(cfg, &controllers, &base, &quad)?;
    fs::create_dir_all(&cfg.out)
        .map_err(|e| CliError::Config(format!("output directory {}: {e}", cfg.out.display())))?;

    let seeds = cfg.seeds();
    let mut results = Vec::with_capacity(seeds.len() * controllers.len());
    for c in &controllers {
        info!("{c}: {} episodes", seeds.len());
        let batch = run_batch(
            || build_controller(c, &base, &quad, policy.clone()),
            &plant,
            &task,
            &base,
            &seeds,
        )
        .map_err(|e| CliError::Runtime(format!("{c}: {e}")))?;
        results.extend(batch);
    }
    let summaries = summarize(&results);
    write_outputs(&cfg.out, &results, &summaries).map_err(runtime_err)?;
    Ok(RunOutput { results, summaries })
}

fn ms(seconds: f64) -> String {
    format!("{:.2}", 1e3 * seconds)
}

pub fn write_outputs(
    dir: &Path,
    results: &[EpisodeResult],
    summaries: &[Summary],
) -> Result<(), csv::Error> {
    write_episodes(&dir.join("episodes.csv"), results)?;
    write_summary(&dir.join("summary.csv"), summaries)?;
    write_plotdata(&dir.join("plotdata.csv"), summaries)?;
    write_trajectories(&dir.join("trajectories.csv"), results)
}

pub fn write_episodes(path: &Path, results: &[EpisodeResult]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(EPISODES_HEADER)?;
    for r in results {
        w.write_record([
            r.controller.clone(),
            r.seed.to_string(),
            r.tracking_cost.to_string(),
            r.violation_cost.to_string(),
            ms(r.mean_runtime),
            ms(r.mean_feedback_time),
            r.failures.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary(path: &Path, summaries: &[Summary]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for s in summaries {
        w.write_record([
            s.controller.clone(),
            s.episodes.to_string(),
            s.tracking_cost.0.to_string(),
            s.tracking_cost.1.to_string(),
            s.violation_cost.0.to_string(),
            s.violation_cost.1.to_string(),
            format!("{:.2}", s.runtime_ms.0),
            format!("{:.2}", s.runtime_ms.1),
            format!("{:.2}", s.feedback_ms.0),
            format!("{:.2}", s.feedback_ms.1),
            format!("{:.2}", s.failure_pct),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_plotdata(path: &Path, summaries: &[Summary]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PLOTDATA_HEADER)?;
    for s in summaries {
        let (track, viol) = (s.tracking_cost.0, s.violation_cost.0);
        w.write_record([
            s.controller.clone(),
            track.to_string(),
            viol.to_string(),
            (track + viol).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Header of `trajectories.csv`: identifiers, then state, control and
/// reference-state components.
pub fn trajectories_header() -> Vec<String> {
    let mut h: Vec<String> = ["controller", "seed", "step", "time", "failed"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..N_X).map(|i| format!("x{i}")));
    h.extend((0..N_U).map(|i| format!("u{i}")));
    h.extend((0..N_X).map(|i| format!("ref{i}")));
    h
}

pub fn write_trajectories(path: &Path, results: &[EpisodeResult]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(trajectories_header())?;
    for r in results {
        for (step, rec) in r.records.iter().enumerate() {
            let mut row = vec![
                r.controller.clone(),
                r.seed.to_string(),
                step.to_string(),
                rec.time.to_string(),
                u8::from(rec.failed).to_string(),
            ];
            row.extend(rec.state.iter().map(f64::to_string));
            row.extend(rec.control.iter().map(f64::to_string));
            row.extend(rec.reference.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
