//! Log-barrier tightening of box constraints and construction of the per-stage
//! QP data around a linearization trajectory.
//!
//! Stage quadratics are stored in absolute coordinates:
//! `½ [x;u]ᵀ [Q Sᵀ; S R] [x;u] + qᵀx + rᵀu + const`, with dynamics
//! `x⁺ = A x + B u + c`. Stages `0..M` carry hard box data; stages `M..N` and
//! the terminal stage carry barrier terms instead (only when `M < N`).

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::ocp::{DiscreteDynamics, OcpSpec, Reference, Trajectory};

/// Hard box on a stage, `x_lb ≤ x ≤ x_ub`, `u_lb ≤ u ≤ u_ub`. Infinite
/// entries are absent faces.
#[derive(Debug, Clone, PartialEq)]
pub struct StageBounds {
    pub x_lb: DVector<f64>,
    pub x_ub: DVector<f64>,
    pub u_lb: DVector<f64>,
    pub u_ub: DVector<f64>,
}

impl StageBounds {
    pub fn from_spec(spec: &OcpSpec) -> Self {
        Self {
            x_lb: spec.x_lb.clone(),
            x_ub: spec.x_ub.clone(),
            u_lb: spec.u_lb.clone(),
            u_ub: spec.u_ub.clone(),
        }
    }

    /// The box as `d + Gx x + Gu u ≤ 0`, one row per finite face.
    pub fn inequalities(&self) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let n_x = self.x_lb.len();
        let n_u = self.u_lb.len();
        let mut rows: Vec<(usize, f64, f64)> = Vec::new();
        for (offset, lb, ub) in [(0, &self.x_lb, &self.x_ub), (n_x, &self.u_lb, &self.u_ub)] {
            for i in 0..lb.len() {
                if ub[i].is_finite() {
                    rows.push((offset + i, 1.0, -ub[i]));
                }
                if lb[i].is_finite() {
                    rows.push((offset + i, -1.0, lb[i]));
                }
            }
        }
        let mut gx = DMatrix::zeros(rows.len(), n_x);
        let mut gu = DMatrix::zeros(rows.len(), n_u);
        let mut d = DVector::zeros(rows.len());
        for (row, (col, sign, offset)) in rows.into_iter().enumerate() {
            if col < n_x {
                gx[(row, col)] = sign;
            } else {
                gu[(row, col - n_x)] = sign;
            }
            d[row] = offset;
        }
        (gx, gu, d)
    }
}

/// QP data of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageLinearization {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub q_blk: DMatrix<f64>,
    pub r_blk: DMatrix<f64>,
    /// Cross term, `n_u × n_x`.
    pub s_blk: DMatrix<f64>,
    pub q: DVector<f64>,
    pub r: DVector<f64>,
    pub const_term: f64,
    /// Present on first-phase stages only.
    pub bounds: Option<StageBounds>,
}

impl StageLinearization {
    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    /// Value of the stage quadratic at `(x, u)`.
    pub fn cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        0.5 * (x.dot(&(&self.q_blk * x)) + u.dot(&(&self.r_blk * u)))
            + u.dot(&(&self.s_blk * x))
            + self.q.dot(x)
            + self.r.dot(u)
            + self.const_term
    }

    /// Full Hessian `[Q Sᵀ; S R]`.
    pub fn hessian(&self) -> DMatrix<f64> {
        let (n_x, n_u) = (self.n_x(), self.n_u());
        let mut h = DMatrix::zeros(n_x + n_u, n_x + n_u);
        h.view_mut((0, 0), (n_x, n_x)).copy_from(&self.q_blk);
        h.view_mut((n_x, n_x), (n_u, n_u)).copy_from(&self.r_blk);
        h.view_mut((n_x, 0), (n_u, n_x)).copy_from(&self.s_blk);
        h.view_mut((0, n_x), (n_x, n_u))
            .copy_from(&self.s_blk.transpose());
        h
    }
}

/// Quadratic `½ xᵀP x + pᵀx + c0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalQuadratic {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub constant: f64,
}

impl TerminalQuadratic {
    pub fn zero(n_x: usize) -> Self {
        Self {
            hessian: DMatrix::zeros(n_x, n_x),
            gradient: DVector::zeros(n_x),
            constant: 0.0,
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.gradient.dot(x) + self.constant
    }
}

/// `−τ Σᵢ log(−gᵢ)`; every residual must be strictly negative.
pub fn barrier_value(residuals: &[f64], tau: f64) -> Result<f64> {
    let mut sum = 0.0;
    for (i, g) in residuals.iter().enumerate() {
        if !(*g < 0.0) {
            return Err(Error::InfeasiblePoint { stage: 0, index: i });
        }
        sum += (-g).ln();
    }
    Ok(-tau * sum)
}

/// Value, gradient and (diagonal) Hessian of the box barrier
/// `−τ Σⱼ [log(ub_j − z_j) + log(z_j − lb_j)]` over the finite faces.
pub fn box_barrier(
    z: &DVector<f64>,
    lb: &DVector<f64>,
    ub: &DVector<f64>,
    tau: f64,
    stage: usize,
) -> Result<(f64, DVector<f64>, DVector<f64>)> {
    let n = z.len();
    let mut value = 0.0;
    let mut grad = DVector::zeros(n);
    let mut hess = DVector::zeros(n);
    for j in 0..n {
        for (gap, sign) in [(ub[j] - z[j], 1.0), (z[j] - lb[j], -1.0)] {
            if gap.is_infinite() {
                continue;
            }
            if !(gap > 0.0) {
                return Err(Error::InfeasiblePoint { stage, index: j });
            }
            value -= tau * gap.ln();
            grad[j] += sign * tau / gap;
            hess[j] += tau / (gap * gap);
        }
    }
    Ok((value, grad, hess))
}

/// Local quadratic model of one stage: Hessian, gradient and value at the
/// linearization point.
#[derive(Debug, Clone, PartialEq)]
pub struct StageQuadratic {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub value: f64,
}

/// GGN model of `l(z) = Σ w_j (z_j − z°_j)²`, plus the box barrier when `tau`
/// is given. For boxes the barrier GGN term `τ Σ ∇g∇gᵀ/g²` is diagonal.
pub fn ggn_stage_hessian(
    point: &DVector<f64>,
    reference: &DVector<f64>,
    weights: &DVector<f64>,
    lb: &DVector<f64>,
    ub: &DVector<f64>,
    tau: Option<f64>,
) -> Result<StageQuadratic> {
    let n = point.len();
    check_dim("stage reference", n, reference.len())?;
    check_dim("stage weights", n, weights.len())?;
    let dev = point - reference;
    let mut hessian = DMatrix::from_diagonal(&(weights * 2.0));
    let mut gradient = weights.component_mul(&dev) * 2.0;
    let mut value = weights.dot(&dev.component_mul(&dev));
    if let Some(tau) = tau {
        let (b, g, h) = box_barrier(point, lb, ub, tau, 0)?;
        value += b;
        gradient += g;
        for j in 0..n {
            hessian[(j, j)] += h[j];
        }
    }
    Ok(StageQuadratic {
        hessian,
        gradient,
        value,
    })
}

/// Output of [`linearize_trajectory`].
#[derive(Debug, Clone)]
pub struct Linearization {
    /// Stages `0..N`.
    pub stages: Vec<StageLinearization>,
    /// Stage-`N` quadratic `(P_N, p_N)`.
    pub terminal: TerminalQuadratic,
    /// Hard terminal box, present only when the second phase is empty.
    pub terminal_bounds: Option<(DVector<f64>, DVector<f64>)>,
}

/// Absolute-coordinate quadratic of a weighted tracking cost plus an optional
/// barrier linearized at `point`.
fn absolute_quadratic(
    point: &DVector<f64>,
    reference: &DVector<f64>,
    weights: &DVector<f64>,
    lb: &DVector<f64>,
    ub: &DVector<f64>,
    tau: Option<f64>,
    stage: usize,
) -> Result<(DMatrix<f64>, DVector<f64>, f64)> {
    // Tracking part is exactly quadratic: ½zᵀ(2W)z − 2(Wz°)ᵀz + z°ᵀWz°.
    let wr = weights.component_mul(reference);
    let mut hessian = DMatrix::from_diagonal(&(weights * 2.0));
    let mut linear = &wr * -2.0;
    let mut constant = wr.dot(reference);
    if let Some(tau) = tau {
        let (b, g, h) = box_barrier(point, lb, ub, tau, stage)?;
        let hz = h.component_mul(point);
        constant += b - g.dot(point) + 0.5 * hz.dot(point);
        linear += g - hz;
        for j in 0..point.len() {
            hessian[(j, j)] += h[j];
        }
    }
    Ok((hessian, linear, constant))
}

fn stack(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(x.len() + u.len(), x.iter().chain(u.iter()).copied())
}

/// Builds the QP data of every stage around `traj`.
///
/// Second-phase points (stages `M..=N`) must lie strictly inside the box when
/// `M < N`; see [`repair_second_phase`].
pub fn linearize_trajectory<D: DiscreteDynamics + ?Sized>(
    traj: &Trajectory,
    reference: &Reference,
    spec: &OcpSpec,
    dynamics: &D,
) -> Result<Linearization> {
    traj.validate(spec)?;
    check_dim("reference horizon", spec.horizon, reference.horizon())?;
    let (n_x, m, n) = (spec.n_x, spec.control_horizon, spec.horizon);
    let tightened = m < n;
    let z_lb = stack(&spec.x_lb, &spec.u_lb);
    let z_ub = stack(&spec.x_ub, &spec.u_ub);
    let z_weights = stack(&spec.q, &spec.r);

    let mut stages = Vec::with_capacity(n);
    for k in 0..n {
        let (x, u) = (&traj.states[k], &traj.controls[k]);
        let (next, a, b) = dynamics.linearize(x, u)?;
        let c = next - &a * x - &b * u;

        let z = stack(x, u);
        let z_ref = stack(&reference.states[k], &reference.controls[k]);
        let tau = (tightened && k >= m).then_some(spec.tau);
        let weights = &z_weights * spec.discount(k);
        let (h, g, const_term) = absolute_quadratic(&z, &z_ref, &weights, &z_lb, &z_ub, tau, k)?;

        stages.push(StageLinearization {
            a,
            b,
            c,
            q_blk: h.view((0, 0), (n_x, n_x)).into_owned(),
            r_blk: h.view((n_x, n_x), (spec.n_u, spec.n_u)).into_owned(),
            s_blk: h.view((n_x, 0), (spec.n_u, n_x)).into_owned(),
            q: g.rows(0, n_x).into_owned(),
            r: g.rows(n_x, spec.n_u).into_owned(),
            const_term,
            bounds: (k < m).then(|| StageBounds::from_spec(spec)),
        });
    }

    let tau = tightened.then_some(spec.tau);
    let weights = &spec.q * spec.discount(n);
    let (hessian, gradient, constant) = absolute_quadratic(
        &traj.states[n],
        &reference.states[n],
        &weights,
        &spec.x_lb,
        &spec.x_ub,
        tau,
        n,
    )?;
    Ok(Linearization {
        stages,
        terminal: TerminalQuadratic {
            hessian,
            gradient,
            constant,
        },
        terminal_bounds: (!tightened).then(|| (spec.x_lb.clone(), spec.x_ub.clone())),
    })
}

fn clip_into(v: &mut DVector<f64>, lb: &DVector<f64>, ub: &DVector<f64>) -> usize {
    let mut repaired = 0;
    for j in 0..v.len() {
        let width = ub[j] - lb[j];
        let margin = if width.is_finite() {
            1e-6 * width
        } else {
            1e-6
        };
        let lo = lb[j] + margin;
        let hi = ub[j] - margin;
        if v[j] < lo {
            v[j] = lo;
            repaired += 1;
        } else if v[j] > hi {
            v[j] = hi;
            repaired += 1;
        }
    }
    repaired
}

/// Clips second-phase states and controls to a margin of `1e-6·(ub − lb)`
/// inside the box and returns how many components moved.
pub fn repair_second_phase(traj: &mut Trajectory, spec: &OcpSpec) -> usize {
    let (m, n) = (spec.control_horizon, spec.horizon);
    if m == n {
        return 0;
    }
    let mut repaired = 0;
    for x in &mut traj.states[m..=n] {
        repaired += clip_into(x, &spec.x_lb, &spec.x_ub);
    }
    for u in &mut traj.controls[m..n] {
        repaired += clip_into(u, &spec.u_lb, &spec.u_ub);
    }
    repaired
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocp::LinearDynamics;
    use crate::quadcopter::{benchmark_ocp, QuadParams, Quadcopter, Rk4, HOVER_THRUST, N_U, N_X};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(data: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(data)
    }

    #[test]
    fn barrier_examples() {
        assert_eq!(barrier_value(&[-1.0], 0.1).unwrap(), 0.0);
        assert_relative_eq!(barrier_value(&[-(-1.0f64).exp()], 1.0).unwrap(), 1.0);
        assert_eq!(barrier_value(&[-1.0; 4], 1e-2).unwrap(), 0.0);
        assert!(matches!(
            barrier_value(&[-1.0, 0.0], 1.0),
            Err(Error::InfeasiblePoint { index: 1, .. })
        ));
    }

    #[test]
    fn ggn_scalar_example() {
        // l = ½z², z − 1 ≤ 0, τ = 0.1 at z̄ = 0.
        let h = ggn_stage_hessian(
            &v(&[0.0]),
            &v(&[0.0]),
            &v(&[0.5]),
            &v(&[f64::NEG_INFINITY]),
            &v(&[1.0]),
            Some(0.1),
        )
        .unwrap();
        assert_relative_eq!(h.hessian[(0, 0)], 1.1, epsilon = 1e-15);
    }

    #[test]
    fn ggn_barrier_vanishes_with_tau() {
        let args = (
            v(&[0.2, -0.4]),
            v(&[0.0, 0.1]),
            v(&[1.0, 3.0]),
            v(&[-1.0, -1.0]),
            v(&[1.0, 1.0]),
        );
        let exact = ggn_stage_hessian(&args.0, &args.1, &args.2, &args.3, &args.4, None).unwrap();
        let tiny =
            ggn_stage_hessian(&args.0, &args.1, &args.2, &args.3, &args.4, Some(1e-14)).unwrap();
        assert!((tiny.hessian - &exact.hessian).amax() < 1e-12);
        assert_eq!(exact.hessian, DMatrix::from_diagonal(&v(&[2.0, 6.0])));
    }

    #[test]
    fn symmetric_box_center_has_no_barrier_gradient() {
        let point = v(&[1.0, -2.0]);
        let lb = v(&[0.5, -3.0]);
        let ub = v(&[1.5, -1.0]);
        let tau = 0.01;
        let (_, g, h) = box_barrier(&point, &lb, &ub, tau, 0).unwrap();
        assert!(g.amax() < 1e-15);
        assert_relative_eq!(h[0], 2.0 * tau / 0.25);
        assert_relative_eq!(h[1], 2.0 * tau / 1.0);
    }

    #[test]
    fn ggn_rejects_point_outside_box() {
        let err = ggn_stage_hessian(
            &v(&[2.0]),
            &v(&[0.0]),
            &v(&[1.0]),
            &v(&[-1.0]),
            &v(&[1.0]),
            Some(0.1),
        );
        assert!(matches!(err, Err(Error::InfeasiblePoint { .. })));
        // Without tightening the same point is fine.
        assert!(ggn_stage_hessian(
            &v(&[2.0]),
            &v(&[0.0]),
            &v(&[1.0]),
            &v(&[-1.0]),
            &v(&[1.0]),
            None
        )
        .is_ok());
    }

    #[test]
    fn box_inequalities_skip_infinite_faces() {
        let bounds = StageBounds {
            x_lb: v(&[-1.0, f64::NEG_INFINITY]),
            x_ub: v(&[1.0, 2.0]),
            u_lb: v(&[0.0]),
            u_ub: v(&[f64::INFINITY]),
        };
        let (gx, gu, d) = bounds.inequalities();
        assert_eq!(d.len(), 4);
        let x = v(&[0.5, 1.0]);
        let u = v(&[3.0]);
        let residual = &d + &gx * &x + &gu * &u;
        assert!(residual.iter().all(|r| *r < 0.0));
        let outside = &d + &gx * v(&[0.5, 2.5]) + &gu * &u;
        assert_eq!(outside.iter().filter(|r| **r > 0.0).count(), 1);
    }

    fn lq_spec(m: usize, n: usize) -> OcpSpec {
        OcpSpec {
            n_x: 2,
            n_u: 1,
            control_horizon: m,
            horizon: n,
            dt: 0.1,
            q: v(&[1.0, 0.5]),
            r: v(&[0.2]),
            x_lb: v(&[-5.0, -5.0]),
            x_ub: v(&[5.0, 5.0]),
            u_lb: v(&[-3.0]),
            u_ub: v(&[3.0]),
            tau: 1e-3,
            gamma: 1.0,
        }
    }

    fn double_integrator() -> LinearDynamics {
        LinearDynamics::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.005, 0.1]),
        )
        .with_offset(v(&[0.01, -0.02]))
    }

    #[test]
    fn lq_linearization_is_exact() {
        let spec = lq_spec(4, 4);
        let dynamics = double_integrator();
        let traj = Trajectory::constant(&v(&[0.3, -0.2]), &v(&[0.4]), 4);
        let reference = Reference::constant(&v(&[1.0, 0.0]), &v(&[0.1]), 4);
        let lin = linearize_trajectory(&traj, &reference, &spec, &dynamics).unwrap();
        for stage in &lin.stages {
            assert_eq!(stage.a, dynamics.a);
            assert_eq!(stage.b, dynamics.b);
            assert!((&stage.c - &dynamics.c).amax() < 1e-15);
            assert_eq!(stage.q_blk, DMatrix::from_diagonal(&v(&[2.0, 1.0])));
            assert_eq!(stage.r_blk, DMatrix::from_diagonal(&v(&[0.4])));
            assert!(stage.bounds.is_some());
            // Quadratic model reproduces the exact stage cost anywhere.
            let (x, u) = (v(&[-0.7, 2.0]), v(&[1.3]));
            let exact = spec
                .stage_cost(&x, &u, &reference.states[0], &reference.controls[0])
                .unwrap();
            assert_relative_eq!(stage.cost(&x, &u), exact, epsilon = 1e-12);
        }
        assert!(lin.terminal_bounds.is_some());
        let x = v(&[0.25, 1.5]);
        assert_relative_eq!(
            lin.terminal.eval(&x),
            spec.terminal_cost(&x, &reference.states[4]).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn second_phase_is_tightened_and_unbounded() {
        let spec = lq_spec(2, 5);
        let traj = Trajectory::constant(&v(&[0.3, -0.2]), &v(&[0.4]), 5);
        let reference = Reference::constant(&v(&[0.0, 0.0]), &v(&[0.0]), 5);
        let lin = linearize_trajectory(&traj, &reference, &spec, &double_integrator()).unwrap();
        assert!(lin.stages[..2].iter().all(|s| s.bounds.is_some()));
        assert!(lin.stages[2..].iter().all(|s| s.bounds.is_none()));
        assert!(lin.stages[2].q_blk[(0, 0)] > 2.0);
        assert_eq!(lin.stages[1].q_blk[(0, 0)], 2.0);
        assert!(lin.terminal_bounds.is_none());
        assert!(lin.terminal.hessian[(0, 0)] > 2.0);
    }

    #[test]
    fn discount_scales_stage_weights() {
        let mut spec = lq_spec(3, 3);
        spec.gamma = 0.5;
        let traj = Trajectory::constant(&v(&[0.0, 0.0]), &v(&[0.0]), 3);
        let reference = Reference::constant(&v(&[0.0, 0.0]), &v(&[0.0]), 3);
        let lin = linearize_trajectory(&traj, &reference, &spec, &double_integrator()).unwrap();
        assert_eq!(lin.stages[2].q_blk[(0, 0)], 2.0 * 0.25);
        assert_eq!(lin.terminal.hessian[(0, 0)], 2.0 * 0.125);
    }

    fn quad_dynamics() -> Rk4<Quadcopter> {
        Rk4::new(Quadcopter::new(QuadParams::default()).unwrap(), 0.05).unwrap()
    }

    #[test]
    fn affine_residual_reconstructs_dynamics() {
        let dynamics = quad_dynamics();
        let spec = benchmark_ocp(3, 6, 1e-2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let states: Vec<_> = (0..=6)
            .map(|_| {
                let mut x = DVector::from_fn(N_X, |_, _| rng.random_range(-0.15..0.15));
                x[2] += 1.0;
                x
            })
            .collect();
        let controls: Vec<_> = (0..6)
            .map(|_| DVector::from_fn(N_U, |_, _| rng.random_range(0.04..0.1)))
            .collect();
        let traj = Trajectory::new(states, controls).unwrap();
        let (x_ref, u_ref) = crate::quadcopter::lemniscate_reference(0.0, 0.8, 4.5);
        let reference = Reference::constant(&x_ref, &u_ref, 6);
        let lin = linearize_trajectory(&traj, &reference, &spec, &dynamics).unwrap();
        for (k, stage) in lin.stages.iter().enumerate() {
            let (x, u) = (&traj.states[k], &traj.controls[k]);
            let f = dynamics.step(x, u).unwrap();
            let recon = &stage.a * x + &stage.b * u + &stage.c;
            assert!((f - recon).amax() < 1e-14);
        }
    }

    #[test]
    fn hover_at_box_center_has_zero_barrier_gradient() {
        let spec = benchmark_ocp(2, 6, 1e-2);
        let mut center = (&spec.x_lb + &spec.x_ub) * 0.5;
        center[2] = 1.0;
        let u_center = (&spec.u_lb + &spec.u_ub) * 0.5;
        let traj = Trajectory::constant(&center, &u_center, 6);
        // Reference at the linearization point: only the barrier can contribute
        // a gradient.
        let reference = Reference::constant(&center, &u_center, 6);
        let lin = linearize_trajectory(&traj, &reference, &spec, &quad_dynamics()).unwrap();
        for stage in &lin.stages[2..] {
            let grad_x = &stage.q_blk * &center + stage.s_blk.transpose() * &u_center + &stage.q;
            let grad_u = &stage.s_blk * &center + &stage.r_blk * &u_center + &stage.r;
            assert!(grad_x.amax() < 1e-12 && grad_u.amax() < 1e-12);
        }
        let grad_n = &lin.terminal.hessian * &center + &lin.terminal.gradient;
        assert!(grad_n.amax() < 1e-12);
        assert!(HOVER_THRUST > spec.u_lb[0]);
    }

    #[test]
    fn infeasible_second_phase_point_is_reported_then_repaired() {
        let spec = lq_spec(2, 4);
        let mut traj = Trajectory::constant(&v(&[0.0, 0.0]), &v(&[0.0]), 4);
        traj.states[3][1] = 7.0;
        traj.controls[2][0] = -3.0;
        // First-phase violations are allowed.
        traj.controls[0][0] = 10.0;
        let reference = Reference::constant(&v(&[0.0, 0.0]), &v(&[0.0]), 4);
        let err = linearize_trajectory(&traj, &reference, &spec, &double_integrator()).unwrap_err();
        assert!(matches!(err, Error::InfeasiblePoint { stage: 2, index: 2 }));
        assert_eq!(repair_second_phase(&mut traj, &spec), 2);
        assert_relative_eq!(traj.states[3][1], 5.0 - 1e-5);
        assert_relative_eq!(traj.controls[2][0], -3.0 + 6e-6);
        assert_eq!(traj.controls[0][0], 10.0);
        assert!(linearize_trajectory(&traj, &reference, &spec, &double_integrator()).is_ok());
        assert_eq!(repair_second_phase(&mut traj, &spec), 0);
    }

    fn interior_point() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        prop::collection::vec((-2.0..2.0f64, 0.1..2.0f64, 0.01..0.99f64), 1..6).prop_map(|cols| {
            let lb: Vec<f64> = cols.iter().map(|c| c.0).collect();
            let ub: Vec<f64> = cols.iter().map(|c| c.0 + c.1).collect();
            let z: Vec<f64> = cols.iter().map(|c| c.0 + c.1 * c.2).collect();
            (z, lb, ub)
        })
    }

    proptest! {
        #[test]
        fn ggn_hessian_is_symmetric_psd((z, lb, ub) in interior_point(), tau in 1e-6..1.0f64) {
            let n = z.len();
            let z = DVector::from_vec(z);
            let w = DVector::from_fn(n, |i, _| 0.1 * i as f64);
            let model = ggn_stage_hessian(&z, &DVector::zeros(n), &w, &DVector::from_vec(lb), &DVector::from_vec(ub), Some(tau)).unwrap();
            prop_assert_eq!(&model.hessian, &model.hessian.transpose());
            let min_eig = model.hessian.symmetric_eigenvalues().min();
            prop_assert!(min_eig >= -1e-10);
        }

        #[test]
        fn barrier_derivatives_match_finite_differences((z, lb, ub) in interior_point(), tau in 1e-3..1.0f64) {
            let (z, lb, ub) = (DVector::from_vec(z), DVector::from_vec(lb), DVector::from_vec(ub));
            let (_, g, h) = box_barrier(&z, &lb, &ub, tau, 0).unwrap();
            let value = |p: &DVector<f64>| {
                let residuals: Vec<f64> = (0..p.len()).flat_map(|j| [p[j] - ub[j], lb[j] - p[j]]).collect();
                barrier_value(&residuals, tau).unwrap()
            };
            let width = (&ub - &lb).min();
            let eps = 1e-4 * width;
            for j in 0..z.len() {
                let gap = (ub[j] - z[j]).min(z[j] - lb[j]);
                let eps = eps.min(1e-3 * gap);
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[j] += eps;
                zm[j] -= eps;
                let (vp, v0, vm) = (value(&zp), value(&z), value(&zm));
                let fd_g = (vp - vm) / (2.0 * eps);
                let fd_h = (vp - 2.0 * v0 + vm) / (eps * eps);
                prop_assert!((fd_g - g[j]).abs() <= 1e-6 * (1.0 + g[j].abs()), "grad {} vs {}", fd_g, g[j]);
                prop_assert!((fd_h - h[j]).abs() <= 1e-4 * (1.0 + h[j].abs()), "hess {} vs {}", fd_h, h[j]);
            }
        }

        #[test]
        fn hessian_is_monotone_in_tau((z, lb, ub) in interior_point(), ta in 1e-6..1.0f64, factor in 1.0..100.0f64) {
            let n = z.len();
            let (z, lb, ub) = (DVector::from_vec(z), DVector::from_vec(lb), DVector::from_vec(ub));
            let w = DVector::from_element(n, 0.3);
            let r = DVector::zeros(n);
            let ha = ggn_stage_hessian(&z, &r, &w, &lb, &ub, Some(ta)).unwrap().hessian;
            let hb = ggn_stage_hessian(&z, &r, &w, &lb, &ub, Some(ta * factor)).unwrap().hessian;
            prop_assert!((hb - ha).symmetric_eigenvalues().min() >= -1e-10);
        }
    }
}
