//! Closed-loop episodes on the quadcopter tracking task and their metrics.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use std::sync::Arc;

use crate::controllers::{
    Controller, ControllerConfig, ControllerKind, MpcController, PolicyController,
};
use crate::error::{check_dim, Error, Result};
use crate::ocp::{OcpSpec, Reference};
use crate::policy::{lqr_policy, LinearPolicy, Policy};
use crate::quadcopter::{
    lemniscate_reference, OdeModel, Quadcopter, Rk4, LEMNISCATE_PERIOD, N_U, N_X, PREDICTION_DT,
};

pub const EPISODE_DURATION: f64 = 4.5;
pub const EPISODE_STEPS: usize = 225;
pub const EULER_SUBSTEPS: usize = 1000;
pub const VIOLATION_WEIGHT: f64 = 100.0;
/// Fraction of the gap between hover thrust and each thrust bound that the
/// stand-in LQR policy may use.
pub const LQR_RANGE: f64 = 0.95;

/// Tracking task: lemniscate amplitude plus the episode protocol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Task {
    pub alpha: f64,
    pub duration: f64,
    pub steps: usize,
    pub substeps: usize,
    pub violation_weight: f64,
    pub period: f64,
    /// Spacing of the reference window handed to the controllers.
    pub prediction_dt: f64,
}

impl Task {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            duration: EPISODE_DURATION,
            steps: EPISODE_STEPS,
            substeps: EULER_SUBSTEPS,
            violation_weight: VIOLATION_WEIGHT,
            period: LEMNISCATE_PERIOD,
            prediction_dt: PREDICTION_DT,
        }
    }

    pub fn easy() -> Self {
        Self::with_alpha(0.8)
    }

    pub fn hard() -> Self {
        Self::with_alpha(1.0)
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "easy" => Ok(Self::easy()),
            "hard" => Ok(Self::hard()),
            other => Err(Error::InvalidSpec(format!(
                "unknown task `{other}` (expected easy or hard)"
            ))),
        }
    }

    pub fn ctrl_period(&self) -> f64 {
        self.duration / self.steps as f64
    }

    pub fn reference_at(&self, t: f64) -> (DVector<f64>, DVector<f64>) {
        lemniscate_reference(t, self.alpha, self.period)
    }

    /// Reference at `t, t + dt, …, t + N·dt`.
    pub fn reference_window(&self, t: f64, horizon: usize) -> Reference {
        let mut states = Vec::with_capacity(horizon + 1);
        let mut controls = Vec::with_capacity(horizon);
        for k in 0..=horizon {
            let (x, u) = self.reference_at(t + k as f64 * self.prediction_dt);
            states.push(x);
            if k < horizon {
                controls.push(u);
            }
        }
        Reference { states, controls }
    }
}

/// `substeps` explicit-Euler steps of `model` over `ctrl_period` with `u` held.
pub fn env_step<M: OdeModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    ctrl_period: f64,
    substeps: usize,
) -> Result<DVector<f64>> {
    let h = ctrl_period / substeps as f64;
    let mut x = x.clone();
    for _ in 0..substeps {
        let dx = model.rhs(&x, u)?;
        x.axpy(h, &dx, 1.0);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("plant state"));
    }
    Ok(x)
}

/// Corners `(x_a, x_b)` of the initial-state box.
pub fn initial_state_box() -> (DVector<f64>, DVector<f64>) {
    let upper =
        DVector::from_column_slice(&[0.5, 0.5, 1.1, 0.5, 0.5, 0.5, 0.2, 0.2, 0.2, 0.5, 0.5, 0.5]);
    let mut lower = -&upper;
    lower[2] = 0.9;
    (lower, upper)
}

pub fn sample_initial_state(seed: u64) -> DVector<f64> {
    let (lower, upper) = initial_state_box();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(N_X, |i, _| {
        lower[i] + (upper[i] - lower[i]) * rng.random::<f64>()
    })
}

/// `‖max(0, h(x, u))‖₁` over the state and control boxes of `spec`.
pub fn box_violation(x: &DVector<f64>, u: &DVector<f64>, spec: &OcpSpec) -> f64 {
    let excess = |v: &DVector<f64>, lb: &DVector<f64>, ub: &DVector<f64>| -> f64 {
        (0..v.len())
            .map(|i| (v[i] - ub[i]).max(0.0) + (lb[i] - v[i]).max(0.0))
            .sum()
    };
    excess(x, &spec.x_lb, &spec.x_ub) + excess(u, &spec.u_lb, &spec.u_ub)
}

/// One closed-loop sample.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub time: f64,
    pub state: DVector<f64>,
    pub control: DVector<f64>,
    pub reference: DVector<f64>,
    pub tracking_cost: f64,
    pub runtime: f64,
    pub feedback_time: f64,
    pub failed: bool,
}

/// `J_v = (w/N_s) Σ_t ‖max(0, h(x_t, u_t))‖₁`.
pub fn violation_cost(records: &[StepRecord], spec: &OcpSpec, weight: f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let total: f64 = records
        .iter()
        .map(|r| box_violation(&r.state, &r.control, spec))
        .sum();
    weight * total / records.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub controller: String,
    pub seed: u64,
    /// Mean per-step tracking cost.
    pub tracking_cost: f64,
    pub violation_cost: f64,
    /// Mean seconds per step.
    pub mean_runtime: f64,
    pub mean_feedback_time: f64,
    /// Failed steps; after an abort every remaining step counts as failed.
    pub failures: usize,
    pub steps: usize,
    /// The plant state became invalid and the episode stopped early.
    pub aborted: bool,
    pub records: Vec<StepRecord>,
}

impl EpisodeResult {
    pub fn failure_rate(&self) -> f64 {
        self.failures as f64 / self.steps as f64
    }
}

/// Runs one episode from the initial state drawn with `seed`. `spec` supplies
/// the tracking weights and the boxes the metrics are measured against.
pub fn run_episode<M: OdeModel + ?Sized>(
    controller: &mut dyn Controller,
    plant: &M,
    task: &Task,
    spec: &OcpSpec,
    seed: u64,
) -> Result<EpisodeResult> {
    run_episode_from(
        controller,
        plant,
        task,
        spec,
        seed,
        sample_initial_state(seed),
    )
}

pub fn run_episode_from<M: OdeModel + ?Sized>(
    controller: &mut dyn Controller,
    plant: &M,
    task: &Task,
    spec: &OcpSpec,
    seed: u64,
    x0: DVector<f64>,
) -> Result<EpisodeResult> {
    check_dim("initial state", spec.n_x, x0.len())?;
    controller.reset();
    let period = task.ctrl_period();
    let horizon = controller.horizon();
    let mut x = x0;
    let mut records = Vec::with_capacity(task.steps);
    let mut failures = 0;
    let mut aborted = false;

    for i in 0..task.steps {
        let t = i as f64 * period;
        let window = task.reference_window(t, horizon);
        let report = controller.step(&x, &window)?;
        let tracking_cost =
            spec.stage_cost(&x, &report.u0, &window.states[0], &task.reference_at(t).1)?;
        failures += usize::from(report.failed);
        records.push(StepRecord {
            time: t,
            state: x.clone(),
            control: report.u0.clone(),
            reference: window.states[0].clone(),
            tracking_cost,
            runtime: report.runtime(),
            feedback_time: report.feedback_time,
            failed: report.failed,
        });
        match env_step(plant, &x, &report.u0, period, task.substeps) {
            Ok(next) => x = next,
            Err(err) => {
                log::warn!(
                    "{} seed {seed}: episode aborted at step {i}: {err}",
                    controller.id()
                );
                aborted = true;
                failures += task.steps - i - 1;
                break;
            }
        }
    }

    let n = records.len() as f64;
    Ok(EpisodeResult {
        controller: controller.id(),
        seed,
        tracking_cost: records.iter().map(|r| r.tracking_cost).sum::<f64>() / n,
        violation_cost: violation_cost(&records, spec, task.violation_weight),
        mean_runtime: records.iter().map(|r| r.runtime).sum::<f64>() / n,
        mean_feedback_time: records.iter().map(|r| r.feedback_time).sum::<f64>() / n,
        failures,
        steps: task.steps,
        aborted,
        records,
    })
}

/// Runs one episode per seed in parallel; `make` builds a fresh controller
/// for each episode. Results keep the order of `seeds`.
pub fn run_batch<F, M>(
    make: F,
    plant: &M,
    task: &Task,
    spec: &OcpSpec,
    seeds: &[u64],
) -> Result<Vec<EpisodeResult>>
where
    F: Fn() -> Result<Box<dyn Controller>> + Sync,
    M: OdeModel + Sync + ?Sized,
{
    seeds
        .par_iter()
        .map(|&seed| {
            let mut controller = make()?;
            run_episode(controller.as_mut(), plant, task, spec, seed)
        })
        .collect()
}

/// Hover LQR on the RK4 prediction model, squashed into the thrust box like a
/// trained policy's output layer. Used when no trained weights are supplied.
pub fn hover_lqr(spec: &OcpSpec, model: &Quadcopter) -> Result<LinearPolicy> {
    let dynamics = Rk4::new(model.clone(), spec.dt)?;
    let hover = model.hover_control();
    let lo = &hover - (&hover - &spec.u_lb) * LQR_RANGE;
    let hi = &hover + (&spec.u_ub - &hover) * LQR_RANGE;
    lqr_policy(spec, &dynamics, &DVector::zeros(N_X), &hover)?.with_limits(lo, hi)
}

/// Builds the quadcopter controller named by `config`. `base` supplies the
/// weights and boxes; `model` is the prediction model.
pub fn build_controller(
    config: &ControllerConfig,
    base: &OcpSpec,
    model: &Quadcopter,
    policy: Option<Arc<dyn Policy>>,
) -> Result<Box<dyn Controller>> {
    check_dim("benchmark control", N_U, base.n_u)?;
    let hover = model.hover_control();
    if config.kind == ControllerKind::PolicyOnly {
        let policy = policy.ok_or_else(|| Error::InvalidSpec("PPO-RL needs a policy".into()))?;
        return Ok(Box::new(PolicyController::new(
            policy,
            base.u_lb.clone(),
            base.u_ub.clone(),
            hover,
        )?));
    }
    let dynamics = Rk4::new(model.clone(), base.dt)?;
    let policy = if config.kind.needs_policy() {
        policy
    } else {
        None
    };
    Ok(Box::new(MpcController::new(
        *config, base, dynamics, policy, hover,
    )?))
}

/// Mean and standard deviation, summed in sorted order so the result does not
/// depend on the order of `values`.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let mut sq: Vec<f64> = sorted.iter().map(|v| (v - mean) * (v - mean)).collect();
    sq.sort_by(f64::total_cmp);
    let var = if sorted.len() > 1 {
        sq.iter().sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Per-controller aggregate over episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub controller: String,
    pub episodes: usize,
    pub tracking_cost: (f64, f64),
    pub violation_cost: (f64, f64),
    pub runtime_ms: (f64, f64),
    pub feedback_ms: (f64, f64),
    /// Percentage of failed steps over all episodes.
    pub failure_pct: f64,
}

/// Groups `results` by controller, in order of first appearance.
pub fn summarize(results: &[EpisodeResult]) -> Vec<Summary> {
    let mut order: Vec<&str> = Vec::new();
    for r in results {
        if !order.contains(&r.controller.as_str()) {
            order.push(&r.controller);
        }
    }
    order
        .into_iter()
        .map(|id| {
            let group: Vec<&EpisodeResult> =
                results.iter().filter(|r| r.controller == id).collect();
            let stat = |f: &dyn Fn(&EpisodeResult) -> f64| {
                mean_std(&group.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            let failures: usize = group.iter().map(|r| r.failures).sum();
            let steps: usize = group.iter().map(|r| r.steps).sum();
            Summary {
                controller: id.to_string(),
                episodes: group.len(),
                tracking_cost: stat(&|r| r.tracking_cost),
                violation_cost: stat(&|r| r.violation_cost),
                runtime_ms: stat(&|r| 1e3 * r.mean_runtime),
                feedback_ms: stat(&|r| 1e3 * r.mean_feedback_time),
                failure_pct: 100.0 * failures as f64 / steps as f64,
            }
        })
        .collect()
}
