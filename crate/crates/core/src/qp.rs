//! Primal-dual interior-point solver for box-constrained multi-stage QPs.
//!
//! Each Newton system is an equality-constrained multi-stage QP whose Hessian
//! is augmented by the diagonal `λ/s` of the active box faces; it is solved by
//! one Riccati factorization shared between the Mehrotra predictor and
//! corrector.

use log::warn;
use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};
use crate::linearization::{StageLinearization, TerminalQuadratic};
use crate::ocp::Trajectory;
use crate::riccati::{backward_sweep, forward_sweep, RiccatiSweep};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    /// Convergence tolerance on the largest KKT residual. Stationarity and
    /// feasibility are taken relative to the magnitude of their terms (at
    /// least 1); complementarity is absolute.
    pub tol: f64,
    /// Separate, tighter target for complementarity: on a bound with
    /// multiplier `λ` the primal error is about `λ·s / λ`.
    pub comp_tol: f64,
    /// Residual below which a non-converged result is still usable.
    pub usable_tol: f64,
    pub max_iter: usize,
    pub fraction_to_boundary: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            comp_tol: 1e-10,
            usable_tol: 1e-6,
            max_iter: 50,
            fraction_to_boundary: 0.995,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    /// Iteration limit reached with residuals below `usable_tol`.
    Inaccurate,
    MaxIterations,
    NonFinite,
    Factorization,
}

impl QpStatus {
    pub fn is_usable(self) -> bool {
        matches!(self, QpStatus::Solved | QpStatus::Inaccurate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    pub stationarity: f64,
    /// Dynamics defect and box-slack consistency.
    pub feasibility: f64,
    /// Largest `λ·s` product.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.feasibility)
            .max(self.complementarity)
    }
}

/// Box multipliers of one stage; zero on absent faces.
#[derive(Debug, Clone, PartialEq)]
pub struct StageMultipliers {
    pub x_lower: DVector<f64>,
    pub x_upper: DVector<f64>,
    pub u_lower: DVector<f64>,
    pub u_upper: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    /// `x_0..=x_K`; `x_0` is the fixed initial state.
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    /// One entry per stage `0..=K`; the terminal entry has empty control parts.
    pub multipliers: Vec<StageMultipliers>,
    pub residuals: KktResiduals,
    pub iterations: usize,
    pub status: QpStatus,
    /// Duality measure `μ = λᵀs / m` at every iterate.
    pub duality_history: Vec<f64>,
}

impl QpSolution {
    /// Step from `iterate` to this solution over the solved stages.
    pub fn increment_from(&self, iterate: &Trajectory) -> Trajectory {
        Trajectory {
            states: self
                .states
                .iter()
                .zip(&iterate.states)
                .map(|(a, b)| a - b)
                .collect(),
            controls: self
                .controls
                .iter()
                .zip(&iterate.controls)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }
}

/// One side of a box: `σ(z_var − bound) ≤ 0`, with `σ = +1` for an upper face.
#[derive(Debug, Clone, Copy)]
struct Face {
    var: usize,
    sigma: f64,
    bound: f64,
    /// Initial slack and multiplier level.
    scale: f64,
}

fn faces_of(lb: &DVector<f64>, ub: &DVector<f64>, offset: usize, out: &mut Vec<Face>) {
    for j in 0..lb.len() {
        let width = ub[j] - lb[j];
        let scale = if width.is_finite() {
            (0.05 * width).max(1e-2)
        } else {
            1e-2
        };
        if ub[j].is_finite() {
            out.push(Face {
                var: offset + j,
                sigma: 1.0,
                bound: ub[j],
                scale,
            });
        }
        if lb[j].is_finite() {
            out.push(Face {
                var: offset + j,
                sigma: -1.0,
                bound: lb[j],
                scale,
            });
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct InteriorPointSolver {
    pub settings: QpSettings,
}

/// Problem view shared by both entry points.
struct Problem<'a> {
    stages: &'a [StageLinearization],
    terminal: &'a TerminalQuadratic,
    x0: &'a DVector<f64>,
    /// Faces per stage `0..=K`; stage-local variable index into `[x; u]`.
    faces: Vec<Vec<Face>>,
    n_x: usize,
    n_u: usize,
}

/// Primal-dual iterate.
#[derive(Clone)]
struct Iterate {
    states: Vec<DVector<f64>>,
    controls: Vec<DVector<f64>>,
    slack: Vec<Vec<f64>>,
    mult: Vec<Vec<f64>>,
}

struct Direction {
    dx: Vec<DVector<f64>>,
    du: Vec<DVector<f64>>,
    ds: Vec<Vec<f64>>,
    dl: Vec<Vec<f64>>,
}

impl InteriorPointSolver {
    pub fn new(settings: QpSettings) -> Self {
        Self { settings }
    }

    /// First-phase QP: stage boxes from `stages`, quadratic terminal cost on
    /// `x_K` without a terminal box.
    pub fn solve(
        &self,
        stages: &[StageLinearization],
        terminal: &TerminalQuadratic,
        x0: &DVector<f64>,
    ) -> Result<QpSolution> {
        self.solve_full_horizon(stages, terminal, None, x0)
    }

    /// Full-horizon QP with an optional hard box on the terminal state.
    pub fn solve_full_horizon(
        &self,
        stages: &[StageLinearization],
        terminal: &TerminalQuadratic,
        terminal_bounds: Option<(&DVector<f64>, &DVector<f64>)>,
        x0: &DVector<f64>,
    ) -> Result<QpSolution> {
        if stages.is_empty() {
            return Err(Error::InvalidSpec("QP needs at least one stage".into()));
        }
        let n_x = stages[0].n_x();
        let n_u = stages[0].n_u();
        check_dim("QP initial state", n_x, x0.len())?;
        check_dim("QP terminal Hessian", n_x, terminal.hessian.nrows())?;

        let mut faces = Vec::with_capacity(stages.len() + 1);
        for (k, st) in stages.iter().enumerate() {
            check_dim("QP stage state", n_x, st.n_x())?;
            check_dim("QP stage control", n_u, st.n_u())?;
            let mut f = Vec::new();
            if let Some(b) = &st.bounds {
                // x_0 is pinned to the measurement and never bounded.
                if k > 0 {
                    faces_of(&b.x_lb, &b.x_ub, 0, &mut f);
                }
                faces_of(&b.u_lb, &b.u_ub, n_x, &mut f);
            }
            faces.push(f);
        }
        let mut f = Vec::new();
        if let Some((lb, ub)) = terminal_bounds {
            faces_of(lb, ub, 0, &mut f);
        }
        faces.push(f);

        let problem = Problem {
            stages,
            terminal,
            x0,
            faces,
            n_x,
            n_u,
        };
        Ok(self.run(&problem))
    }

    fn run(&self, pb: &Problem) -> QpSolution {
        let settings = &self.settings;
        let n_faces: usize = pb.faces.iter().map(Vec::len).sum();

        let mut it = match initial_point(pb) {
            Ok(it) => it,
            Err(_) => return pb.failure(QpStatus::Factorization, 0),
        };

        if n_faces > 0 && mehrotra_start(pb, &mut it).is_err() {
            return pb.failure(QpStatus::Factorization, 0);
        }

        if n_faces == 0 {
            let (residuals, scaled) = pb.residuals(&it);
            let status = if scaled.converged(settings) {
                QpStatus::Solved
            } else {
                QpStatus::Inaccurate
            };
            return pb.finish(it, residuals, 0, status, Vec::new());
        }

        let mut history = Vec::new();
        let mut best: Option<(Iterate, KktResiduals, f64)> = None;
        for iter in 0..settings.max_iter {
            let (residuals, scaled_parts) = pb.residuals(&it);
            let scaled = scaled_parts.max;
            let mu = duality_measure(&it, n_faces);
            history.push(mu);
            log::trace!(
                "iter {iter}: mu {mu:.2e} stat {:.2e} feas {:.2e} comp {:.2e} scaled {scaled:.2e}",
                residuals.stationarity,
                residuals.feasibility,
                residuals.complementarity
            );
            if !scaled.is_finite() {
                return self.give_up(pb, best, QpStatus::NonFinite, iter, history);
            }
            if scaled_parts.converged(settings) {
                return pb.finish(it, residuals, iter, QpStatus::Solved, history);
            }
            if best.as_ref().is_none_or(|(_, _, b)| scaled < *b) {
                best = Some((it.clone(), residuals, scaled));
            }

            // Predictor.
            let (mut step_stages, mut step_terminal) = pb.step_problem(&it);
            let Some(mut sweep) = factorize_step(&step_stages, &step_terminal) else {
                return self.give_up(pb, best, QpStatus::Factorization, iter, history);
            };
            let target_aff: Vec<Vec<f64>> = it
                .slack
                .iter()
                .zip(&it.mult)
                .map(|(s, l)| s.iter().zip(l).map(|(s, l)| -s * l).collect())
                .collect();
            let aff = pb.direction(
                &it,
                &target_aff,
                &mut step_stages,
                &mut step_terminal,
                &mut sweep,
            );
            let alpha_aff = max_step(&it, &aff, 1.0);
            let mu_aff = it
                .slack
                .iter()
                .flatten()
                .zip(aff.ds.iter().flatten())
                .zip(it.mult.iter().flatten().zip(aff.dl.iter().flatten()))
                .map(|((s, ds), (l, dl))| (s + alpha_aff * ds) * (l + alpha_aff * dl))
                .sum::<f64>()
                / n_faces as f64;
            let sigma = (mu_aff / mu).powi(3).min(1.0);

            // Corrector.
            let target: Vec<Vec<f64>> = (0..it.slack.len())
                .map(|k| {
                    (0..it.slack[k].len())
                        .map(|j| {
                            sigma * mu
                                - it.slack[k][j] * it.mult[k][j]
                                - aff.ds[k][j] * aff.dl[k][j]
                        })
                        .collect()
                })
                .collect();
            let dir = pb.direction(
                &it,
                &target,
                &mut step_stages,
                &mut step_terminal,
                &mut sweep,
            );
            let alpha = max_step(&it, &dir, settings.fraction_to_boundary);
            log::trace!("  sigma {sigma:.2e} alpha_aff {alpha_aff:.3e} alpha {alpha:.3e}");
            apply_step(&mut it, &dir, alpha);
        }

        let (residuals, scaled) = pb.residuals(&it);
        let scaled = scaled.max;
        history.push(duality_measure(&it, n_faces));
        if best.as_ref().is_none_or(|(_, _, b)| scaled < *b) {
            best = Some((it, residuals, scaled));
        }
        self.give_up(
            pb,
            best,
            QpStatus::MaxIterations,
            settings.max_iter,
            history,
        )
    }

    /// Falls back to the best iterate seen; it is usable when its scaled
    /// residual is below `usable_tol`, otherwise `status` is reported.
    fn give_up(
        &self,
        pb: &Problem,
        best: Option<(Iterate, KktResiduals, f64)>,
        status: QpStatus,
        iterations: usize,
        history: Vec<f64>,
    ) -> QpSolution {
        match best {
            Some((it, residuals, scaled)) if scaled < self.settings.usable_tol => {
                warn!("QP stopped ({status:?}) with scaled KKT residual {scaled:.2e}");
                pb.finish(it, residuals, iterations, QpStatus::Inaccurate, history)
            }
            _ => {
                let mut failed = pb.failure(status, iterations);
                failed.duality_history = history;
                failed
            }
        }
    }
}

fn duality_measure(it: &Iterate, n_faces: usize) -> f64 {
    it.slack
        .iter()
        .flatten()
        .zip(it.mult.iter().flatten())
        .map(|(s, l)| s * l)
        .sum::<f64>()
        / n_faces.max(1) as f64
}

/// Largest `α ≤ 1` keeping slacks and multipliers positive, scaled by `eta`.
fn max_step(it: &Iterate, dir: &Direction, eta: f64) -> f64 {
    let mut alpha: f64 = 1.0;
    let pairs = it
        .slack
        .iter()
        .flatten()
        .zip(dir.ds.iter().flatten())
        .chain(it.mult.iter().flatten().zip(dir.dl.iter().flatten()));
    for (v, dv) in pairs {
        if *dv < 0.0 {
            alpha = alpha.min(-eta * v / dv);
        }
    }
    alpha.min(1.0)
}

fn apply_step(it: &mut Iterate, dir: &Direction, alpha: f64) {
    for (x, dx) in it.states.iter_mut().zip(&dir.dx) {
        x.axpy(alpha, dx, 1.0);
    }
    for (u, du) in it.controls.iter_mut().zip(&dir.du) {
        u.axpy(alpha, du, 1.0);
    }
    for (s, ds) in it.slack.iter_mut().flatten().zip(dir.ds.iter().flatten()) {
        *s += alpha * ds;
    }
    for (l, dl) in it.mult.iter_mut().flatten().zip(dir.dl.iter().flatten()) {
        *l += alpha * dl;
    }
}

/// Unconstrained Riccati solution clipped into the box; slacks and multipliers
/// start at the face scale.
fn initial_point(pb: &Problem) -> Result<Iterate> {
    let (_, sweep) = backward_sweep(pb.stages, pb.terminal)?;
    let (mut states, mut controls) = forward_sweep(&sweep, pb.x0, pb.stages);
    let mut slack = Vec::with_capacity(pb.faces.len());
    let mut mult = Vec::with_capacity(pb.faces.len());
    for (k, faces) in pb.faces.iter().enumerate() {
        let mut s = Vec::with_capacity(faces.len());
        for face in faces {
            let z = pb.var_mut(&mut states, &mut controls, k, face.var);
            if face.sigma > 0.0 {
                *z = z.min(face.bound);
            } else {
                *z = z.max(face.bound);
            }
        }
        for face in faces {
            let z = pb.var(&states, &controls, k, face.var);
            let gap = face.sigma * (face.bound - z);
            s.push(gap.max(face.scale));
        }
        mult.push(faces.iter().map(|f| f.scale).collect());
        slack.push(s);
    }
    Ok(Iterate {
        states,
        controls,
        slack,
        mult,
    })
}

/// Scaled KKT residuals: the largest of the three, and complementarity alone.
#[derive(Debug, Clone, Copy)]
struct Scaled {
    max: f64,
    comp: f64,
}

impl Scaled {
    fn converged(&self, settings: &QpSettings) -> bool {
        self.max < settings.tol && self.comp < settings.comp_tol
    }
}

/// Mean multiplier size up to which complementarity is measured absolutely.
const COMP_SCALE_MAX: f64 = 100.0;

/// Relative shifts of `E_k` tried when a Newton system does not factorize;
/// pivots lost to roundoff once `λ/s` dwarfs the cost Hessian come back.
const REGULARIZATION: [f64; 4] = [0.0, 1e-14, 1e-12, 1e-10];

fn factorize_step(
    stages: &[StageLinearization],
    terminal: &TerminalQuadratic,
) -> Option<RiccatiSweep> {
    REGULARIZATION
        .iter()
        .find_map(|&reg| RiccatiSweep::factorize_regularized(stages, &terminal.hessian, reg).ok())
}

/// Mehrotra's starting heuristic: a full affine step from `it`, then slacks
/// and multipliers shifted to be positive and balanced.
fn mehrotra_start(pb: &Problem, it: &mut Iterate) -> Result<()> {
    let (mut stages, mut terminal) = pb.step_problem(it);
    let mut sweep = factorize_step(&stages, &terminal).ok_or(crate::Error::Factorization {
        stage: 0,
        pivot: f64::NAN,
    })?;
    let target: Vec<Vec<f64>> = it
        .slack
        .iter()
        .zip(&it.mult)
        .map(|(s, l)| s.iter().zip(l).map(|(s, l)| -s * l).collect())
        .collect();
    let dir = pb.direction(it, &target, &mut stages, &mut terminal, &mut sweep);
    if dir
        .dx
        .iter()
        .chain(&dir.du)
        .any(|v| !v.iter().all(|x| x.is_finite()))
    {
        return Err(crate::Error::NonFinite("QP starting point"));
    }
    apply_step(it, &dir, 1.0);
    let shift = |v: &mut Vec<Vec<f64>>| {
        let min = v.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        let d = (-1.5 * min).max(0.0);
        v.iter_mut().flatten().for_each(|x| *x += d);
    };
    shift(&mut it.slack);
    shift(&mut it.mult);
    let dot: f64 = it
        .slack
        .iter()
        .flatten()
        .zip(it.mult.iter().flatten())
        .map(|(s, l)| s * l)
        .sum();
    let sum_s: f64 = it.slack.iter().flatten().sum();
    let sum_l: f64 = it.mult.iter().flatten().sum();
    let ds = 0.5 * dot / sum_l.max(f64::MIN_POSITIVE);
    let dl = 0.5 * dot / sum_s.max(f64::MIN_POSITIVE);
    for (k, faces) in pb.faces.iter().enumerate() {
        for (j, face) in faces.iter().enumerate() {
            it.slack[k][j] = (it.slack[k][j] + ds).max(1e-3 * face.scale);
            it.mult[k][j] = (it.mult[k][j] + dl).max(1e-3 * face.scale);
        }
    }
    Ok(())
}

impl Problem<'_> {
    fn horizon(&self) -> usize {
        self.stages.len()
    }

    fn var(&self, states: &[DVector<f64>], controls: &[DVector<f64>], k: usize, var: usize) -> f64 {
        if var < self.n_x {
            states[k][var]
        } else {
            controls[k][var - self.n_x]
        }
    }

    fn var_mut<'v>(
        &self,
        states: &'v mut [DVector<f64>],
        controls: &'v mut [DVector<f64>],
        k: usize,
        var: usize,
    ) -> &'v mut f64 {
        if var < self.n_x {
            &mut states[k][var]
        } else {
            &mut controls[k][var - self.n_x]
        }
    }

    /// Gradient of the Lagrangian without the dynamics multipliers,
    /// split into state and control parts per stage.
    fn gradients(&self, it: &Iterate) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let k_max = self.horizon();
        let mut gx = Vec::with_capacity(k_max + 1);
        let mut gu = Vec::with_capacity(k_max);
        for (k, st) in self.stages.iter().enumerate() {
            let (x, u) = (&it.states[k], &it.controls[k]);
            gx.push(&st.q_blk * x + st.s_blk.transpose() * u + &st.q);
            gu.push(&st.r_blk * u + &st.s_blk * x + &st.r);
        }
        gx.push(&self.terminal.hessian * &it.states[k_max] + &self.terminal.gradient);
        for (k, faces) in self.faces.iter().enumerate() {
            for (face, lam) in faces.iter().zip(&it.mult[k]) {
                if face.var < self.n_x {
                    gx[k][face.var] += face.sigma * lam;
                } else {
                    gu[k][face.var - self.n_x] += face.sigma * lam;
                }
            }
        }
        (gx, gu)
    }

    fn defects(&self, it: &Iterate) -> Vec<DVector<f64>> {
        self.stages
            .iter()
            .enumerate()
            .map(|(k, st)| {
                &st.a * &it.states[k] + &st.b * &it.controls[k] + &st.c - &it.states[k + 1]
            })
            .collect()
    }

    /// `σ z + s − σ b` per face.
    fn slack_residuals(&self, it: &Iterate) -> Vec<Vec<f64>> {
        self.faces
            .iter()
            .enumerate()
            .map(|(k, faces)| {
                faces
                    .iter()
                    .zip(&it.slack[k])
                    .map(|(f, s)| {
                        f.sigma * (self.var(&it.states, &it.controls, k, f.var) - f.bound) + s
                    })
                    .collect()
            })
            .collect()
    }

    /// KKT residuals and their largest value relative to the magnitude of the
    /// terms that make them up. Costates are recovered from state
    /// stationarity, so the stationarity residual is the one of the controls.
    fn residuals(&self, it: &Iterate) -> (KktResiduals, Scaled) {
        let (gx, gu) = self.gradients(it);
        let k_max = self.horizon();
        let lam_max = it
            .mult
            .iter()
            .flatten()
            .fold(0.0, |m: f64, l| m.max(l.abs()));
        let mut stat_scale = lam_max
            .max(1.0)
            .max((&self.terminal.hessian * &it.states[k_max]).amax())
            .max(self.terminal.gradient.amax());
        let mut feas_scale: f64 = 1.0;
        let mut costate = gx[k_max].clone();
        let mut stationarity: f64 = 0.0;
        for k in (0..k_max).rev() {
            let st = &self.stages[k];
            let (x, u) = (&it.states[k], &it.controls[k]);
            let bt_costate = st.b.transpose() * &costate;
            let ru = &gu[k] + &bt_costate;
            stationarity = stationarity.max(ru.amax());
            stat_scale = stat_scale
                .max((&st.r_blk * u).amax())
                .max((&st.s_blk * x).amax())
                .max(st.r.amax())
                .max(bt_costate.amax())
                .max((&st.q_blk * x).amax())
                .max((st.s_blk.transpose() * u).amax())
                .max(st.q.amax());
            feas_scale = feas_scale
                .max((&st.a * x).amax())
                .max((&st.b * u).amax())
                .max(st.c.amax())
                .max(it.states[k + 1].amax());
            costate = &gx[k] + st.a.transpose() * &costate;
        }
        let mut feasibility = self
            .defects(it)
            .iter()
            .map(|d| d.amax())
            .fold(0.0, f64::max);
        for r in self.slack_residuals(it).iter().flatten() {
            feasibility = feasibility.max(r.abs());
        }
        for face in self.faces.iter().flatten() {
            feas_scale = feas_scale.max(face.bound.abs());
        }
        let n_mult = it.mult.iter().map(Vec::len).sum::<usize>().max(1);
        let lam_sum: f64 = it.mult.iter().flatten().map(|l| l.abs()).sum();
        let comp_scale = (lam_sum / (COMP_SCALE_MAX * n_mult as f64)).max(1.0);
        let complementarity = it
            .slack
            .iter()
            .flatten()
            .zip(it.mult.iter().flatten())
            .map(|(s, l)| (s * l).abs())
            .fold(0.0, f64::max);
        let comp = complementarity / comp_scale;
        let scaled = Scaled {
            max: (stationarity / stat_scale)
                .max(feasibility / feas_scale)
                .max(comp),
            comp,
        };
        let residuals = KktResiduals {
            stationarity,
            feasibility,
            complementarity,
        };
        (residuals, scaled)
    }

    /// Stage data of the Newton system with the barrier-augmented Hessian;
    /// gradients are filled in by [`Problem::direction`].
    fn step_problem(&self, it: &Iterate) -> (Vec<StageLinearization>, TerminalQuadratic) {
        let defects = self.defects(it);
        let mut stages: Vec<StageLinearization> = self
            .stages
            .iter()
            .zip(defects)
            .map(|(st, defect)| StageLinearization {
                a: st.a.clone(),
                b: st.b.clone(),
                c: defect,
                q_blk: st.q_blk.clone(),
                r_blk: st.r_blk.clone(),
                s_blk: st.s_blk.clone(),
                q: DVector::zeros(self.n_x),
                r: DVector::zeros(self.n_u),
                const_term: 0.0,
                bounds: None,
            })
            .collect();
        let mut terminal = TerminalQuadratic {
            hessian: self.terminal.hessian.clone(),
            gradient: DVector::zeros(self.n_x),
            constant: 0.0,
        };
        let k_max = self.horizon();
        for (k, faces) in self.faces.iter().enumerate() {
            for (j, face) in faces.iter().enumerate() {
                let sigma_jj = it.mult[k][j] / it.slack[k][j];
                if k == k_max {
                    terminal.hessian[(face.var, face.var)] += sigma_jj;
                } else if face.var < self.n_x {
                    stages[k].q_blk[(face.var, face.var)] += sigma_jj;
                } else {
                    let v = face.var - self.n_x;
                    stages[k].r_blk[(v, v)] += sigma_jj;
                }
            }
        }
        (stages, terminal)
    }

    /// Newton direction for complementarity target `λΔs + sΔλ = target`.
    fn direction(
        &self,
        it: &Iterate,
        target: &[Vec<f64>],
        stages: &mut [StageLinearization],
        terminal: &mut TerminalQuadratic,
        sweep: &mut RiccatiSweep,
    ) -> Direction {
        let (mut gx, mut gu) = self.gradients(it);
        let primal = self.slack_residuals(it);
        let k_max = self.horizon();
        for (k, faces) in self.faces.iter().enumerate() {
            for (j, face) in faces.iter().enumerate() {
                let (s, l) = (it.slack[k][j], it.mult[k][j]);
                let corr = face.sigma * (target[k][j] + l * primal[k][j]) / s;
                if face.var < self.n_x {
                    gx[k][face.var] += corr;
                } else {
                    gu[k][face.var - self.n_x] += corr;
                }
            }
        }
        for k in 0..k_max {
            stages[k].q.copy_from(&gx[k]);
            stages[k].r.copy_from(&gu[k]);
        }
        terminal.gradient.copy_from(&gx[k_max]);
        sweep.update_gradients(stages, &terminal.gradient, 0.0);
        let (dx, du) = forward_sweep(sweep, &DVector::zeros(self.n_x), stages);

        let mut ds = Vec::with_capacity(self.faces.len());
        let mut dl = Vec::with_capacity(self.faces.len());
        for (k, faces) in self.faces.iter().enumerate() {
            let mut dsk = Vec::with_capacity(faces.len());
            let mut dlk = Vec::with_capacity(faces.len());
            for (j, face) in faces.iter().enumerate() {
                let dz = self.var(&dx, &du, k, face.var);
                let d_s = -primal[k][j] - face.sigma * dz;
                let d_l = (target[k][j] - it.mult[k][j] * d_s) / it.slack[k][j];
                dsk.push(d_s);
                dlk.push(d_l);
            }
            ds.push(dsk);
            dl.push(dlk);
        }
        Direction { dx, du, ds, dl }
    }

    fn finish(
        &self,
        it: Iterate,
        residuals: KktResiduals,
        iterations: usize,
        status: QpStatus,
        duality_history: Vec<f64>,
    ) -> QpSolution {
        let k_max = self.horizon();
        let multipliers = (0..=k_max)
            .map(|k| {
                let n_u = if k < k_max { self.n_u } else { 0 };
                let mut m = StageMultipliers {
                    x_lower: DVector::zeros(self.n_x),
                    x_upper: DVector::zeros(self.n_x),
                    u_lower: DVector::zeros(n_u),
                    u_upper: DVector::zeros(n_u),
                };
                for (face, lam) in self.faces[k].iter().zip(&it.mult[k]) {
                    let (target, var) = match (face.var < self.n_x, face.sigma > 0.0) {
                        (true, true) => (&mut m.x_upper, face.var),
                        (true, false) => (&mut m.x_lower, face.var),
                        (false, true) => (&mut m.u_upper, face.var - self.n_x),
                        (false, false) => (&mut m.u_lower, face.var - self.n_x),
                    };
                    target[var] = *lam;
                }
                m
            })
            .collect();
        QpSolution {
            states: it.states,
            controls: it.controls,
            multipliers,
            residuals,
            iterations,
            status,
            duality_history,
        }
    }

    fn failure(&self, status: QpStatus, iterations: usize) -> QpSolution {
        let k_max = self.horizon();
        QpSolution {
            states: vec![self.x0.clone(); k_max + 1],
            controls: vec![DVector::zeros(self.n_u); k_max],
            multipliers: Vec::new(),
            residuals: KktResiduals {
                stationarity: f64::INFINITY,
                feasibility: f64::INFINITY,
                complementarity: f64::INFINITY,
            },
            iterations,
            status,
            duality_history: Vec::new(),
        }
    }
}
