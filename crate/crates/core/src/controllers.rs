//! The RTI, PT, CLC and PEPT controllers and the standalone policy controller.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use log::warn;
use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};
use crate::linearization::{linearize_trajectory, repair_second_phase, TerminalQuadratic};
use crate::ocp::{shift, DiscreteDynamics, OcpSpec, Reference, Trajectory};
use crate::policy::Policy;
use crate::qp::{InteriorPointSolver, QpStatus};
use crate::riccati::{
    backward_sweep, closed_loop_rollout, closed_loop_sweep, forward_sweep, AffineFeedback,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControllerKind {
    Rti,
    Pt,
    Clc,
    Pept,
    /// The external policy alone, saturated to the control box.
    PolicyOnly,
}

impl ControllerKind {
    fn label(self) -> &'static str {
        match self {
            ControllerKind::Rti => "RTI",
            ControllerKind::Pt => "PT",
            ControllerKind::Clc => "CLC",
            ControllerKind::Pept => "PEPT",
            ControllerKind::PolicyOnly => "PPO-RL",
        }
    }

    pub fn needs_policy(self) -> bool {
        matches!(
            self,
            ControllerKind::Clc | ControllerKind::Pept | ControllerKind::PolicyOnly
        )
    }
}

/// How the previous solution seeds the next iterate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum InitStrategy {
    WarmStart,
    #[default]
    Shift,
}

/// How PEPT generates its second-phase linearization point from the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum SecondPhaseInit {
    #[default]
    Stagewise,
    Rollout,
}

/// Controller identity, parsed from and rendered to ids such as `RTI-40`,
/// `PT-10-20-4`, `PEPT-10-20-2-r` or `PPO-RL`. A trailing `-w` selects
/// warm-starting instead of shifting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    /// First-phase length `M`; equals `horizon` for RTI.
    pub control_horizon: usize,
    pub horizon: usize,
    /// Barrier exponent, `τ = 10^(−β)`.
    pub beta: u32,
    pub init: InitStrategy,
    pub second_phase_init: SecondPhaseInit,
}

impl ControllerConfig {
    pub fn rti(horizon: usize) -> Self {
        Self {
            kind: ControllerKind::Rti,
            control_horizon: horizon,
            horizon,
            beta: 0,
            init: InitStrategy::Shift,
            second_phase_init: SecondPhaseInit::Stagewise,
        }
    }

    pub fn tightened(
        kind: ControllerKind,
        control_horizon: usize,
        horizon: usize,
        beta: u32,
    ) -> Self {
        Self {
            kind,
            control_horizon,
            horizon,
            beta,
            init: InitStrategy::Shift,
            second_phase_init: SecondPhaseInit::Stagewise,
        }
    }

    pub fn policy_only() -> Self {
        Self {
            kind: ControllerKind::PolicyOnly,
            control_horizon: 0,
            horizon: 0,
            beta: 0,
            init: InitStrategy::Shift,
            second_phase_init: SecondPhaseInit::Stagewise,
        }
    }

    pub fn tau(&self) -> f64 {
        10f64.powi(-(self.beta as i32))
    }

    /// True when the solve is a plain full-horizon RTI step, which includes
    /// split controllers with an empty second phase.
    pub fn is_full_horizon(&self) -> bool {
        self.kind == ControllerKind::Rti || self.control_horizon == self.horizon
    }

    /// `base` with this controller's horizons and barrier weight.
    pub fn ocp_spec(&self, base: &OcpSpec) -> Result<OcpSpec> {
        if self.kind == ControllerKind::PolicyOnly {
            return Err(Error::InvalidSpec(
                "the policy controller has no OCP".into(),
            ));
        }
        let mut spec = base.clone();
        spec.control_horizon = self.control_horizon;
        spec.horizon = self.horizon;
        if self.kind != ControllerKind::Rti {
            spec.tau = self.tau();
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn parse(id: &str) -> Result<Self> {
        let fail = |reason: String| Error::ControllerId {
            id: id.to_string(),
            reason,
        };
        if id == "PPO-RL" {
            return Ok(Self::policy_only());
        }
        let mut tokens = id.split('-');
        let kind = match tokens.next().unwrap_or_default() {
            "RTI" => ControllerKind::Rti,
            "PT" => ControllerKind::Pt,
            "CLC" => ControllerKind::Clc,
            "PEPT" => ControllerKind::Pept,
            other => return Err(fail(format!("unknown controller kind `{other}`"))),
        };
        let mut numbers = Vec::new();
        let mut rollout = false;
        let mut warm = false;
        for token in tokens {
            match token {
                "r" if !rollout && !warm => rollout = true,
                "w" if !warm => warm = true,
                _ if rollout || warm => {
                    return Err(fail(format!("unexpected token `{token}` after flag")))
                }
                _ => {
                    let n: usize = token
                        .parse()
                        .map_err(|_| fail(format!("`{token}` is not a non-negative integer")))?;
                    numbers.push(n);
                }
            }
        }
        if rollout && kind != ControllerKind::Pept {
            return Err(fail("`r` is only valid for PEPT".into()));
        }
        let mut config = match (kind, numbers.as_slice()) {
            (ControllerKind::Rti, [n]) => Self::rti(*n),
            (ControllerKind::Rti, _) => {
                return Err(fail(format!(
                    "RTI takes exactly one horizon number, got {}",
                    numbers.len()
                )))
            }
            (_, [m, n, beta]) => {
                let beta = u32::try_from(*beta)
                    .ok()
                    .filter(|b| *b <= 300)
                    .ok_or_else(|| fail(format!("barrier exponent `{beta}` out of range")))?;
                Self::tightened(kind, *m, *n, beta)
            }
            _ => {
                return Err(fail(format!(
                    "{} takes M-N-beta, got {} numbers",
                    kind.label(),
                    numbers.len()
                )))
            }
        };
        if config.horizon == 0 {
            return Err(fail("horizon must be positive".into()));
        }
        if config.control_horizon == 0 || config.control_horizon > config.horizon {
            return Err(fail(format!(
                "need 1 <= M <= N, got M = {}, N = {}",
                config.control_horizon, config.horizon
            )));
        }
        if rollout {
            config.second_phase_init = SecondPhaseInit::Rollout;
        }
        if warm {
            config.init = InitStrategy::WarmStart;
        }
        Ok(config)
    }
}

impl fmt::Display for ControllerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ControllerKind::PolicyOnly => return f.write_str("PPO-RL"),
            ControllerKind::Rti => write!(f, "RTI-{}", self.horizon)?,
            kind => write!(
                f,
                "{}-{}-{}-{}",
                kind.label(),
                self.control_horizon,
                self.horizon,
                self.beta
            )?,
        }
        if self.kind == ControllerKind::Pept && self.second_phase_init == SecondPhaseInit::Rollout {
            f.write_str("-r")?;
        }
        if self.init == InitStrategy::WarmStart {
            f.write_str("-w")?;
        }
        Ok(())
    }
}

impl FromStr for ControllerConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

/// Outcome of one sampling instant.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub u0: DVector<f64>,
    /// Seconds spent before the state measurement is needed, including the
    /// post-solve update of the iterate.
    pub prep_time: f64,
    /// Seconds from state measurement to the applied control.
    pub feedback_time: f64,
    pub failed: bool,
    /// Second-phase components clipped into the box.
    pub repairs: usize,
    pub qp_iterations: usize,
}

impl StepReport {
    pub fn runtime(&self) -> f64 {
        self.prep_time + self.feedback_time
    }
}

/// A feedback law driven by a state measurement and a reference window.
pub trait Controller: Send {
    fn id(&self) -> String;
    /// Reference window length `N` the controller expects.
    fn horizon(&self) -> usize;
    fn reset(&mut self);
    fn step(&mut self, x_hat: &DVector<f64>, reference: &Reference) -> Result<StepReport>;
}

/// Second-phase states `x_M..=x_N` and controls `u_M..u_N`.
pub type SecondPhase = (Vec<DVector<f64>>, Vec<DVector<f64>>);

/// Policy-generated second phase `x_M..=x_N`, `u_M..u_N` evaluated stage by
/// stage at the previous solution `prev`.
///
/// With `shifted`, stage `k` uses `x*_k` and `x*_{k+1}` of the previous window
/// instead of `x*_{k−1}` and `x*_k`. The policy tracks the reference entry at
/// the new-window index of the state it is fed.
pub fn init_stagewise<D: DiscreteDynamics + ?Sized>(
    prev: &Trajectory,
    policy: &dyn Policy,
    dynamics: &D,
    reference: &Reference,
    control_horizon: usize,
    shifted: bool,
) -> Result<SecondPhase> {
    let n = prev.horizon();
    let m = control_horizon;
    check_dim("reference horizon", n, reference.horizon())?;
    if m == 0 || m > n {
        return Err(Error::InvalidSpec(format!(
            "need 1 <= M <= N, got M = {m}, N = {n}"
        )));
    }
    let offset = usize::from(shifted);
    let fed_index = |j: usize| j - offset;
    let mut states = Vec::with_capacity(n - m + 1);
    for k in m..=n {
        let j = k + offset - 1;
        let x = &prev.states[j];
        let u = policy.eval(x, &reference.states[fed_index(j)])?;
        states.push(dynamics.step(x, &u)?);
    }
    let mut controls = Vec::with_capacity(n - m);
    for k in m..n {
        let j = k + offset;
        controls.push(policy.eval(&prev.states[j], &reference.states[fed_index(j)])?);
    }
    Ok((states, controls))
}

/// Policy-generated second phase by a closed-loop rollout from the first
/// policy-propagated state `x_M`.
pub fn init_rollout<D: DiscreteDynamics + ?Sized>(
    prev: &Trajectory,
    policy: &dyn Policy,
    dynamics: &D,
    reference: &Reference,
    control_horizon: usize,
    shifted: bool,
) -> Result<SecondPhase> {
    let n = prev.horizon();
    let m = control_horizon;
    check_dim("reference horizon", n, reference.horizon())?;
    if m == 0 || m > n {
        return Err(Error::InvalidSpec(format!(
            "need 1 <= M <= N, got M = {m}, N = {n}"
        )));
    }
    let j = if shifted { m } else { m - 1 };
    let x = &prev.states[j];
    let u = policy.eval(x, &reference.states[m - 1])?;
    let mut states = vec![dynamics.step(x, &u)?];
    let mut controls = Vec::with_capacity(n - m);
    for k in m..n {
        let x = &states[k - m];
        let u = policy.eval(x, &reference.states[k])?;
        let next = dynamics.step(x, &u)?;
        controls.push(u);
        states.push(next);
    }
    Ok((states, controls))
}

/// One-linearization-per-sample MPC controller over `dynamics`.
pub struct MpcController<D> {
    config: ControllerConfig,
    spec: OcpSpec,
    dynamics: D,
    policy: Option<Arc<dyn Policy>>,
    solver: InteriorPointSolver,
    cold_control: DVector<f64>,
    iterate: Option<Trajectory>,
    last_u: DVector<f64>,
}

/// What the preparation phase hands to the feedback phase.
enum Tail {
    None,
    Riccati(crate::riccati::RiccatiSweep),
    ClosedLoop(Vec<AffineFeedback>),
}

struct Prepared {
    lin: crate::linearization::Linearization,
    terminal: TerminalQuadratic,
    tail: Tail,
    repairs: usize,
}

impl<D: DiscreteDynamics> MpcController<D> {
    /// `base` supplies weights, boxes and `dt`; horizons and `τ` come from
    /// `config`. `cold_control` fills the controls of the episode-start iterate.
    pub fn new(
        config: ControllerConfig,
        base: &OcpSpec,
        dynamics: D,
        policy: Option<Arc<dyn Policy>>,
        cold_control: DVector<f64>,
    ) -> Result<Self> {
        let spec = config.ocp_spec(base)?;
        check_dim("dynamics state", spec.n_x, dynamics.n_x())?;
        check_dim("dynamics control", spec.n_u, dynamics.n_u())?;
        check_dim("cold-start control", spec.n_u, cold_control.len())?;
        let needs_policy = matches!(config.kind, ControllerKind::Clc | ControllerKind::Pept)
            && !config.is_full_horizon();
        if needs_policy && policy.is_none() {
            return Err(Error::InvalidSpec(format!("{config} needs a policy")));
        }
        if let Some(p) = &policy {
            check_dim("policy state", spec.n_x, p.n_x())?;
            check_dim("policy control", spec.n_u, p.n_u())?;
        }
        Ok(Self {
            config,
            spec,
            dynamics,
            policy,
            solver: InteriorPointSolver::default(),
            last_u: cold_control.clone(),
            cold_control,
            iterate: None,
        })
    }

    pub fn with_solver(mut self, solver: InteriorPointSolver) -> Self {
        self.solver = solver;
        self
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn spec(&self) -> &OcpSpec {
        &self.spec
    }

    /// Iterate the next step starts from (after init), if any.
    pub fn iterate(&self) -> Option<&Trajectory> {
        self.iterate.as_ref()
    }

    pub fn set_iterate(&mut self, traj: Trajectory) -> Result<()> {
        traj.validate(&self.spec)?;
        self.iterate = Some(traj);
        Ok(())
    }

    fn policy(&self) -> &dyn Policy {
        self.policy.as_deref().expect("checked at construction")
    }

    /// Linearization point for this step.
    fn initial_iterate(&self, x_hat: &DVector<f64>, reference: &Reference) -> Result<Trajectory> {
        let Some(prev) = &self.iterate else {
            return Ok(Trajectory::constant(
                x_hat,
                &self.cold_control,
                self.spec.horizon,
            ));
        };
        let shifted = self.config.init == InitStrategy::Shift;
        let mut traj = if shifted {
            shift(prev, &self.dynamics)?
        } else {
            prev.clone()
        };
        let (m, n) = (self.spec.control_horizon, self.spec.horizon);
        if self.config.kind == ControllerKind::Pept && m < n {
            let init = match self.config.second_phase_init {
                SecondPhaseInit::Stagewise => init_stagewise,
                SecondPhaseInit::Rollout => init_rollout,
            };
            let (states, controls) =
                init(prev, self.policy(), &self.dynamics, reference, m, shifted)?;
            for (slot, x) in traj.states[m..].iter_mut().zip(states) {
                *slot = x;
            }
            for (slot, u) in traj.controls[m..].iter_mut().zip(controls) {
                *slot = u;
            }
        }
        traj.states[0] = x_hat.clone();
        Ok(traj)
    }

    fn prepare(&self, x_hat: &DVector<f64>, reference: &Reference) -> Result<Prepared> {
        let mut iterate = self.initial_iterate(x_hat, reference)?;
        let (m, n) = (self.spec.control_horizon, self.spec.horizon);
        let full = self.config.is_full_horizon();

        if self.config.kind == ControllerKind::Clc && !full {
            for k in m..n {
                iterate.controls[k] = self
                    .policy()
                    .eval(&iterate.states[k], &reference.states[k])?;
            }
        }
        let repairs = if full {
            0
        } else {
            repair_second_phase(&mut iterate, &self.spec)
        };
        let lin = linearize_trajectory(&iterate, reference, &self.spec, &self.dynamics)?;

        let (terminal, tail) = if full {
            (lin.terminal.clone(), Tail::None)
        } else if self.config.kind == ControllerKind::Clc {
            let feedback = (m..n)
                .map(|k| {
                    // Anchored at the repaired control so the law passes
                    // through the linearization point.
                    let (x, x_ref) = (&iterate.states[k], &reference.states[k]);
                    let jac = self.policy().jacobian(x, x_ref)?;
                    Ok(AffineFeedback::from_linearization(
                        &iterate.controls[k],
                        &jac,
                        x,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let terminal = closed_loop_sweep(&lin.stages[m..], &feedback, &lin.terminal)?;
            (terminal, Tail::ClosedLoop(feedback))
        } else {
            let (terminal, sweep) = backward_sweep(&lin.stages[m..], &lin.terminal)?;
            (terminal, Tail::Riccati(sweep))
        };
        Ok(Prepared {
            lin,
            terminal,
            tail,
            repairs,
        })
    }

    fn fail(
        &mut self,
        prep_time: f64,
        feedback_time: f64,
        repairs: usize,
        iterations: usize,
    ) -> StepReport {
        StepReport {
            u0: self.last_u.clone(),
            prep_time,
            feedback_time,
            failed: true,
            repairs,
            qp_iterations: iterations,
        }
    }
}

impl<D: DiscreteDynamics + Send> Controller for MpcController<D> {
    fn id(&self) -> String {
        self.config.to_string()
    }

    fn horizon(&self) -> usize {
        self.spec.horizon
    }

    fn reset(&mut self) {
        self.iterate = None;
        self.last_u = self.cold_control.clone();
    }

    fn step(&mut self, x_hat: &DVector<f64>, reference: &Reference) -> Result<StepReport> {
        check_dim("measured state", self.spec.n_x, x_hat.len())?;
        check_dim("reference horizon", self.spec.horizon, reference.horizon())?;
        let start = Instant::now();
        let prepared = match self.prepare(x_hat, reference) {
            Ok(p) => p,
            Err(err) if self.iterate.is_some() => {
                // The previous solution is not a valid linearization point;
                // retry from the cold-start iterate.
                warn!("{}: preparation failed, cold restart: {err}", self.config);
                self.iterate = None;
                match self.prepare(x_hat, reference) {
                    Ok(p) => p,
                    Err(err) => {
                        warn!("{}: preparation failed: {err}", self.config);
                        let prep = start.elapsed().as_secs_f64();
                        return Ok(self.fail(prep, 0.0, 0, 0));
                    }
                }
            }
            Err(err) => {
                warn!("{}: preparation failed: {err}", self.config);
                let prep = start.elapsed().as_secs_f64();
                return Ok(self.fail(prep, 0.0, 0, 0));
            }
        };
        let prep_time = start.elapsed().as_secs_f64();

        let m = self.spec.control_horizon;
        let Prepared {
            lin,
            terminal,
            tail,
            repairs,
        } = prepared;
        let feedback_start = Instant::now();
        let solution = match &lin.terminal_bounds {
            Some((lb, ub)) if self.config.is_full_horizon() => {
                self.solver
                    .solve_full_horizon(&lin.stages, &terminal, Some((lb, ub)), x_hat)
            }
            _ => self.solver.solve(&lin.stages[..m], &terminal, x_hat),
        };
        let feedback_time = feedback_start.elapsed().as_secs_f64();

        let solution = match solution {
            Ok(s) if s.status.is_usable() => s,
            Ok(s) => {
                warn!("{}: QP returned {:?}", self.config, s.status);
                self.iterate = None;
                return Ok(self.fail(prep_time, feedback_time, repairs, s.iterations));
            }
            Err(err) => {
                warn!("{}: QP error: {err}", self.config);
                self.iterate = None;
                return Ok(self.fail(prep_time, feedback_time, repairs, 0));
            }
        };
        if solution.status == QpStatus::Inaccurate {
            warn!("{}: using inaccurate QP solution", self.config);
        }
        let u0 = solution.controls[0].clone();

        let post_start = Instant::now();
        let mut states = solution.states;
        let mut controls = solution.controls;
        let x_m = states[m].clone();
        let tail_traj = match &tail {
            Tail::None => None,
            Tail::Riccati(sweep) => Some(forward_sweep(sweep, &x_m, &lin.stages[m..])),
            Tail::ClosedLoop(feedback) => {
                Some(closed_loop_rollout(&lin.stages[m..], feedback, &x_m))
            }
        };
        if let Some((tail_states, tail_controls)) = tail_traj {
            states.extend(tail_states.into_iter().skip(1));
            controls.extend(tail_controls);
        }
        let next = Trajectory { states, controls };
        self.iterate = if next
            .states
            .iter()
            .chain(&next.controls)
            .all(|v| v.iter().all(|e| e.is_finite()))
        {
            Some(next)
        } else {
            None
        };
        self.last_u = u0.clone();
        let post_time = post_start.elapsed().as_secs_f64();

        Ok(StepReport {
            u0,
            prep_time: prep_time + post_time,
            feedback_time,
            failed: false,
            repairs,
            qp_iterations: solution.iterations,
        })
    }
}

/// The policy applied directly, saturated to the control box.
#[derive(Debug, Clone)]
pub struct PolicyController {
    policy: Arc<dyn Policy>,
    u_lb: DVector<f64>,
    u_ub: DVector<f64>,
    last_u: DVector<f64>,
    hold: DVector<f64>,
}

impl PolicyController {
    pub fn new(
        policy: Arc<dyn Policy>,
        u_lb: DVector<f64>,
        u_ub: DVector<f64>,
        hold: DVector<f64>,
    ) -> Result<Self> {
        check_dim("control lower bound", policy.n_u(), u_lb.len())?;
        check_dim("control upper bound", policy.n_u(), u_ub.len())?;
        check_dim("hold control", policy.n_u(), hold.len())?;
        Ok(Self {
            policy,
            u_lb,
            u_ub,
            last_u: hold.clone(),
            hold,
        })
    }
}

impl Controller for PolicyController {
    fn id(&self) -> String {
        ControllerConfig::policy_only().to_string()
    }

    fn horizon(&self) -> usize {
        0
    }

    fn reset(&mut self) {
        self.last_u = self.hold.clone();
    }

    fn step(&mut self, x_hat: &DVector<f64>, reference: &Reference) -> Result<StepReport> {
        let start = Instant::now();
        let raw = self.policy.eval(x_hat, &reference.states[0]);
        let runtime = start.elapsed().as_secs_f64();
        match raw {
            Ok(u) => {
                let u = u.zip_zip_map(&self.u_lb, &self.u_ub, |u, lo, hi| u.clamp(lo, hi));
                self.last_u = u.clone();
                Ok(StepReport {
                    u0: u,
                    prep_time: runtime,
                    feedback_time: 0.0,
                    failed: false,
                    repairs: 0,
                    qp_iterations: 0,
                })
            }
            Err(Error::Dimension {
                what,
                expected,
                got,
            }) => Err(Error::Dimension {
                what,
                expected,
                got,
            }),
            Err(err) => {
                warn!("policy evaluation failed: {err}");
                Ok(StepReport {
                    u0: self.last_u.clone(),
                    prep_time: runtime,
                    feedback_time: 0.0,
                    failed: true,
                    repairs: 0,
                    qp_iterations: 0,
                })
            }
        }
    }
}
