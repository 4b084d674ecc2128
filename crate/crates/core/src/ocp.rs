//! Problem definition shared by every controller: horizons, weights, boxes,
//! trajectories, references and the shifting primitive.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Discrete-time dynamics `x⁺ = f(x, u)` together with its Jacobians.
pub trait DiscreteDynamics {
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;

    /// Returns `(f(x, u), ∂f/∂x, ∂f/∂u)`.
    fn linearize(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)>;
}

/// Affine dynamics `x⁺ = A x + B u + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl LinearDynamics {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        let c = DVector::zeros(a.nrows());
        Self { a, b, c }
    }

    pub fn with_offset(mut self, c: DVector<f64>) -> Self {
        self.c = c;
        self
    }
}

impl DiscreteDynamics for LinearDynamics {
    fn n_x(&self) -> usize {
        self.a.nrows()
    }

    fn n_u(&self) -> usize {
        self.b.ncols()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("linear dynamics state", self.n_x(), x.len())?;
        check_dim("linear dynamics control", self.n_u(), u.len())?;
        Ok(&self.a * x + &self.b * u + &self.c)
    }

    fn linearize(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
        Ok((self.step(x, u)?, self.a.clone(), self.b.clone()))
    }
}

/// Full problem definition for one two-phase OCP.
///
/// Weights are diagonal and stored as vectors. Bounds may be infinite, in which
/// case the corresponding constraint is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "OcpSpecFile", into = "OcpSpecFile")]
pub struct OcpSpec {
    pub n_x: usize,
    pub n_u: usize,
    /// Control-horizon length `M` (first phase, hard constraints).
    pub control_horizon: usize,
    /// Total horizon length `N`.
    pub horizon: usize,
    /// Prediction sampling time in seconds.
    pub dt: f64,
    pub q: DVector<f64>,
    pub r: DVector<f64>,
    pub x_lb: DVector<f64>,
    pub x_ub: DVector<f64>,
    pub u_lb: DVector<f64>,
    pub u_ub: DVector<f64>,
    /// Barrier parameter on the second phase.
    pub tau: f64,
    /// Discount factor; stage `k` weights are scaled by `gamma^k`.
    pub gamma: f64,
}

impl OcpSpec {
    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::InvalidSpec(msg));
        if self.n_x == 0 || self.n_u == 0 {
            return invalid("state and control dimensions must be positive".into());
        }
        if self.control_horizon < 1 || self.horizon < self.control_horizon {
            return invalid(format!(
                "horizons must satisfy N >= M >= 1 (M = {}, N = {})",
                self.control_horizon, self.horizon
            ));
        }
        check_dim("state weights", self.n_x, self.q.len())?;
        check_dim("control weights", self.n_u, self.r.len())?;
        check_dim("state lower bound", self.n_x, self.x_lb.len())?;
        check_dim("state upper bound", self.n_x, self.x_ub.len())?;
        check_dim("control lower bound", self.n_u, self.u_lb.len())?;
        check_dim("control upper bound", self.n_u, self.u_ub.len())?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return invalid(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return invalid(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return invalid(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if self
            .q
            .iter()
            .chain(self.r.iter())
            .any(|w| !(*w >= 0.0 && w.is_finite()))
        {
            return invalid("weights must be finite and nonnegative".into());
        }
        for (lb, ub, what) in [
            (&self.x_lb, &self.x_ub, "state"),
            (&self.u_lb, &self.u_ub, "control"),
        ] {
            if let Some(i) = (0..lb.len()).find(|&i| !(lb[i] < ub[i]) || lb[i].is_nan()) {
                return invalid(format!("{what} bounds empty at component {i}"));
            }
        }
        Ok(())
    }

    /// Number of second-phase stages `N − M`.
    pub fn tail_len(&self) -> usize {
        self.horizon - self.control_horizon
    }

    pub fn discount(&self, stage: usize) -> f64 {
        if self.gamma == 1.0 {
            1.0
        } else {
            self.gamma.powi(stage as i32)
        }
    }

    /// Stage cost `(x−x°)ᵀQ(x−x°) + (u−u°)ᵀR(u−u°)`, undiscounted.
    pub fn stage_cost(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        x_ref: &DVector<f64>,
        u_ref: &DVector<f64>,
    ) -> Result<f64> {
        check_dim("stage cost state", self.n_x, x.len())?;
        check_dim("stage cost control", self.n_u, u.len())?;
        check_dim("stage cost state reference", self.n_x, x_ref.len())?;
        check_dim("stage cost control reference", self.n_u, u_ref.len())?;
        Ok(weighted_square(&self.q, x, x_ref) + weighted_square(&self.r, u, u_ref))
    }

    /// Terminal cost `(x−x°)ᵀQ(x−x°)`, undiscounted.
    pub fn terminal_cost(&self, x: &DVector<f64>, x_ref: &DVector<f64>) -> Result<f64> {
        check_dim("terminal cost state", self.n_x, x.len())?;
        check_dim("terminal cost reference", self.n_x, x_ref.len())?;
        Ok(weighted_square(&self.q, x, x_ref))
    }
}

fn weighted_square(w: &DVector<f64>, v: &DVector<f64>, v_ref: &DVector<f64>) -> f64 {
    w.iter()
        .zip(v.iter().zip(v_ref.iter()))
        .map(|(w, (a, b))| w * (a - b) * (a - b))
        .sum()
}

/// On-disk form of [`OcpSpec`]; `null` bounds mean unbounded.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct OcpSpecFile {
    n_x: usize,
    n_u: usize,
    control_horizon: usize,
    horizon: usize,
    dt: f64,
    q: Vec<f64>,
    r: Vec<f64>,
    x_lb: Vec<Option<f64>>,
    x_ub: Vec<Option<f64>>,
    u_lb: Vec<Option<f64>>,
    u_ub: Vec<Option<f64>>,
    tau: f64,
    #[serde(default = "default_gamma")]
    gamma: f64,
}

fn default_gamma() -> f64 {
    1.0
}

impl TryFrom<OcpSpecFile> for OcpSpec {
    type Error = Error;

    fn try_from(f: OcpSpecFile) -> Result<Self> {
        let bound = |v: Vec<Option<f64>>, inf: f64| {
            DVector::from_iterator(v.len(), v.into_iter().map(|b| b.unwrap_or(inf)))
        };
        let spec = OcpSpec {
            n_x: f.n_x,
            n_u: f.n_u,
            control_horizon: f.control_horizon,
            horizon: f.horizon,
            dt: f.dt,
            q: DVector::from_vec(f.q),
            r: DVector::from_vec(f.r),
            x_lb: bound(f.x_lb, f64::NEG_INFINITY),
            x_ub: bound(f.x_ub, f64::INFINITY),
            u_lb: bound(f.u_lb, f64::NEG_INFINITY),
            u_ub: bound(f.u_ub, f64::INFINITY),
            tau: f.tau,
            gamma: f.gamma,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<OcpSpec> for OcpSpecFile {
    fn from(s: OcpSpec) -> Self {
        let bound = |v: &DVector<f64>| {
            v.iter()
                .map(|b| if b.is_finite() { Some(*b) } else { None })
                .collect()
        };
        OcpSpecFile {
            n_x: s.n_x,
            n_u: s.n_u,
            control_horizon: s.control_horizon,
            horizon: s.horizon,
            dt: s.dt,
            q: s.q.iter().copied().collect(),
            r: s.r.iter().copied().collect(),
            x_lb: bound(&s.x_lb),
            x_ub: bound(&s.x_ub),
            u_lb: bound(&s.u_lb),
            u_ub: bound(&s.u_ub),
            tau: s.tau,
            gamma: s.gamma,
        }
    }
}

/// States `x_0..=x_N` and controls `u_0..u_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn new(states: Vec<DVector<f64>>, controls: Vec<DVector<f64>>) -> Result<Self> {
        let traj = Self { states, controls };
        traj.check()?;
        Ok(traj)
    }

    /// Every state equal to `x`, every control equal to `u`.
    pub fn constant(x: &DVector<f64>, u: &DVector<f64>, horizon: usize) -> Self {
        Self {
            states: vec![x.clone(); horizon + 1],
            controls: vec![u.clone(); horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    fn check(&self) -> Result<()> {
        check_dim(
            "trajectory states",
            self.controls.len() + 1,
            self.states.len(),
        )?;
        let n_x = self.states[0].len();
        let n_u = self.controls.first().map_or(0, |u| u.len());
        for x in &self.states {
            check_dim("trajectory state", n_x, x.len())?;
        }
        for u in &self.controls {
            check_dim("trajectory control", n_u, u.len())?;
        }
        let finite = self
            .states
            .iter()
            .chain(self.controls.iter())
            .all(|v| v.iter().all(|e| e.is_finite()));
        if !finite {
            return Err(Error::NonFinite("trajectory"));
        }
        Ok(())
    }

    /// Checks lengths and dimensions against `spec`.
    pub fn validate(&self, spec: &OcpSpec) -> Result<()> {
        check_dim("trajectory horizon", spec.horizon, self.horizon())?;
        self.check()?;
        check_dim("trajectory state", spec.n_x, self.states[0].len())?;
        check_dim("trajectory control", spec.n_u, self.controls[0].len())
    }

    /// Largest absolute entry-wise difference to `other`.
    pub fn max_abs_diff(&self, other: &Trajectory) -> f64 {
        self.states
            .iter()
            .zip(&other.states)
            .chain(self.controls.iter().zip(&other.controls))
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max)
    }
}

/// Reference window `x°_0..=x°_N`, `u°_0..u°_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

impl Reference {
    pub fn new(states: Vec<DVector<f64>>, controls: Vec<DVector<f64>>) -> Result<Self> {
        check_dim("reference states", controls.len() + 1, states.len())?;
        Ok(Self { states, controls })
    }

    /// Constant reference, e.g. a regulation target.
    pub fn constant(x: &DVector<f64>, u: &DVector<f64>, horizon: usize) -> Self {
        Self {
            states: vec![x.clone(); horizon + 1],
            controls: vec![u.clone(); horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }
}

/// Shifts `traj` forward by one stage, duplicating the last control:
/// `u⁺ = (u_1, …, u_{N−1}, u_{N−1})`, `x⁺ = (x_1, …, x_N, f(x_N, u_{N−1}))`.
pub fn shift<D: DiscreteDynamics + ?Sized>(traj: &Trajectory, dynamics: &D) -> Result<Trajectory> {
    let n = traj.horizon();
    let last_u = traj.controls[n - 1].clone();
    let tail = dynamics.step(&traj.states[n], &last_u)?;

    let mut states = Vec::with_capacity(n + 1);
    states.extend(traj.states[1..].iter().cloned());
    states.push(tail);

    let mut controls = Vec::with_capacity(n);
    controls.extend(traj.controls[1..].iter().cloned());
    controls.push(last_u);

    Ok(Trajectory { states, controls })
}
