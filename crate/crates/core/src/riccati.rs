//! Riccati recursions over an unconstrained multi-stage QP.
//!
//! Stage indices in this module are local to the slice that is passed in: for
//! the second phase, local stage `0` is global stage `M`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linearization::{StageLinearization, TerminalQuadratic};

/// Smallest admissible pivot of `E_k = R_k + B_kᵀ P_{k+1} B_k`.
pub const MIN_PIVOT: f64 = 1e-12;

/// Cholesky factor of a symmetric matrix, failing on pivots below [`MIN_PIVOT`].
#[derive(Debug, Clone)]
pub(crate) struct SpdFactor {
    lower: DMatrix<f64>,
}

impl SpdFactor {
    pub(crate) fn new(m: &DMatrix<f64>, stage: usize) -> Result<Self> {
        let n = m.nrows();
        let mut lower = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut pivot = m[(j, j)];
            for k in 0..j {
                pivot -= lower[(j, k)] * lower[(j, k)];
            }
            if !(pivot >= MIN_PIVOT) {
                return Err(Error::Factorization { stage, pivot });
            }
            let d = pivot.sqrt();
            lower[(j, j)] = d;
            for i in j + 1..n {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= lower[(i, k)] * lower[(j, k)];
                }
                lower[(i, j)] = s / d;
            }
        }
        Ok(Self { lower })
    }

    pub(crate) fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self
            .lower
            .solve_lower_triangular(rhs)
            .expect("nonzero diagonal");
        self.lower
            .tr_solve_lower_triangular(&y)
            .expect("nonzero diagonal")
    }

    pub(crate) fn solve_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let y = self
            .lower
            .solve_lower_triangular(rhs)
            .expect("nonzero diagonal");
        self.lower
            .tr_solve_lower_triangular(&y)
            .expect("nonzero diagonal")
    }
}

/// Result of a backward Riccati sweep.
#[derive(Debug, Clone)]
pub struct RiccatiSweep {
    /// Feedback gains `K_k`, one per stage.
    pub gains: Vec<DMatrix<f64>>,
    /// Feedforward terms `k_k = −E_k⁻¹ e_k`.
    pub feedforwards: Vec<DVector<f64>>,
    /// `P_k` for `k = 0..=L`; the last entry is the terminal Hessian.
    pub value_hessians: Vec<DMatrix<f64>>,
    /// `p_k` for `k = 0..=L`.
    pub value_gradients: Vec<DVector<f64>>,
    /// Constant of the cost-to-go for `k = 0..=L`.
    pub value_constants: Vec<f64>,
    factors: Vec<SpdFactor>,
}

impl RiccatiSweep {
    /// Quadratic-part recursion: gains `K_k` and value Hessians `P_k`.
    pub(crate) fn factorize(
        stages: &[StageLinearization],
        terminal_hessian: &DMatrix<f64>,
    ) -> Result<Self> {
        Self::factorize_regularized(stages, terminal_hessian, 0.0)
    }

    /// As [`RiccatiSweep::factorize`] with `reg · max diag(E_k)` added to the
    /// diagonal of every `E_k`.
    pub(crate) fn factorize_regularized(
        stages: &[StageLinearization],
        terminal_hessian: &DMatrix<f64>,
        reg: f64,
    ) -> Result<Self> {
        let len = stages.len();
        let mut gains = Vec::with_capacity(len);
        let mut factors = Vec::with_capacity(len);
        let mut hessians = Vec::with_capacity(len + 1);
        hessians.push(terminal_hessian.clone());

        for (k, st) in stages.iter().enumerate().rev() {
            let p_next = hessians.last().expect("terminal pushed");
            let pa = p_next * &st.a;
            let pb = p_next * &st.b;
            let mut e = &st.r_blk + st.b.transpose() * &pb;
            if reg > 0.0 {
                let shift = reg * e.diagonal().max();
                for i in 0..e.nrows() {
                    e[(i, i)] += shift;
                }
            }
            let g = &st.s_blk + st.b.transpose() * &pa;
            let factor = SpdFactor::new(&e, k)?;
            let gain = -factor.solve(&g);
            // Joseph form: a sum of PSD terms, robust when barrier curvature
            // dominates the stage Hessian.
            let a_cl = &st.a + &st.b * &gain;
            let s_t_gain = st.s_blk.transpose() * &gain;
            let mut p = &st.q_blk
                + &s_t_gain
                + s_t_gain.transpose()
                + gain.transpose() * &st.r_blk * &gain
                + a_cl.transpose() * p_next * &a_cl;
            symmetrize(&mut p);
            hessians.push(p);
            gains.push(gain);
            factors.push(factor);
        }
        gains.reverse();
        factors.reverse();
        hessians.reverse();

        Ok(Self {
            gains,
            feedforwards: Vec::new(),
            value_hessians: hessians,
            value_gradients: Vec::new(),
            value_constants: Vec::new(),
            factors,
        })
    }

    /// Linear-part recursion for the gradient data currently in `stages`;
    /// reuses the factorization.
    pub(crate) fn update_gradients(
        &mut self,
        stages: &[StageLinearization],
        terminal_gradient: &DVector<f64>,
        terminal_constant: f64,
    ) {
        let len = stages.len();
        let mut gradients = Vec::with_capacity(len + 1);
        let mut constants = Vec::with_capacity(len + 1);
        let mut feedforwards = Vec::with_capacity(len);
        gradients.push(terminal_gradient.clone());
        constants.push(terminal_constant);

        for (k, st) in stages.iter().enumerate().rev() {
            let p_next = &self.value_hessians[k + 1];
            let grad_next = gradients.last().expect("terminal pushed");
            let pc = p_next * &st.c;
            let lin = &pc + grad_next;
            let e = &st.r + st.b.transpose() * &lin;
            let ff = -self.factors[k].solve_vec(&e);
            let p = &st.q + st.a.transpose() * &lin + self.gains[k].transpose() * &e;
            let c = st.const_term
                + constants.last().expect("terminal pushed")
                + 0.5 * st.c.dot(&pc)
                + grad_next.dot(&st.c)
                + 0.5 * e.dot(&ff);
            gradients.push(p);
            constants.push(c);
            feedforwards.push(ff);
        }
        gradients.reverse();
        constants.reverse();
        feedforwards.reverse();
        self.value_gradients = gradients;
        self.value_constants = constants;
        self.feedforwards = feedforwards;
    }

    /// Cost-to-go at local stage `k`.
    pub fn cost_to_go(&self, k: usize) -> TerminalQuadratic {
        TerminalQuadratic {
            hessian: self.value_hessians[k].clone(),
            gradient: self.value_gradients[k].clone(),
            constant: self.value_constants[k],
        }
    }
}

fn symmetrize(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = v;
            p[(j, i)] = v;
        }
    }
}

/// Backward Riccati sweep over `stages` with terminal cost `terminal`.
/// Returns the cost-to-go at the first stage and the full sweep.
pub fn backward_sweep(
    stages: &[StageLinearization],
    terminal: &TerminalQuadratic,
) -> Result<(TerminalQuadratic, RiccatiSweep)> {
    let mut sweep = RiccatiSweep::factorize(stages, &terminal.hessian)?;
    sweep.update_gradients(stages, &terminal.gradient, terminal.constant);
    Ok((sweep.cost_to_go(0), sweep))
}

/// Rolls the optimal affine feedback forward from `x_start`.
/// Returns states `0..=L` and controls `0..L`.
pub fn forward_sweep(
    sweep: &RiccatiSweep,
    x_start: &DVector<f64>,
    stages: &[StageLinearization],
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let mut states = Vec::with_capacity(stages.len() + 1);
    let mut controls = Vec::with_capacity(stages.len());
    states.push(x_start.clone());
    for (k, st) in stages.iter().enumerate() {
        let x = &states[k];
        let u = &sweep.gains[k] * x + &sweep.feedforwards[k];
        let next = &st.a * x + &st.b * &u + &st.c;
        controls.push(u);
        states.push(next);
    }
    (states, controls)
}

/// Affine feedback `u = gain·x + offset`, typically the first-order expansion
/// of a nonlinear policy around a linearization point.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineFeedback {
    pub gain: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl AffineFeedback {
    /// Expansion `π̄ + J(x − x̄)` of a policy with value `value` and Jacobian
    /// `jacobian` at `point`.
    pub fn from_linearization(
        value: &DVector<f64>,
        jacobian: &DMatrix<f64>,
        point: &DVector<f64>,
    ) -> Self {
        Self {
            gain: jacobian.clone(),
            offset: value - jacobian * point,
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.gain * x + &self.offset
    }
}

/// Cost-to-go of the stages when the control is fixed by `feedback`: the
/// policy is substituted into cost and dynamics and the quadratic is propagated
/// backwards without minimization.
pub fn closed_loop_sweep(
    stages: &[StageLinearization],
    feedback: &[AffineFeedback],
    terminal: &TerminalQuadratic,
) -> Result<TerminalQuadratic> {
    crate::error::check_dim("closed-loop feedback", stages.len(), feedback.len())?;
    let mut value = terminal.clone();
    for (st, fb) in stages.iter().zip(feedback).rev() {
        let (gain, offset) = (&fb.gain, &fb.offset);
        let s_t_gain = st.s_blk.transpose() * gain;
        let r_gain = &st.r_blk * gain;
        let r_offset = &st.r_blk * offset;

        let q_cl = &st.q_blk + &s_t_gain + s_t_gain.transpose() + gain.transpose() * &r_gain;
        let q_lin = &st.q + st.s_blk.transpose() * offset + gain.transpose() * (&r_offset + &st.r);
        let q_const = st.const_term + 0.5 * offset.dot(&r_offset) + st.r.dot(offset);

        let a_cl = &st.a + &st.b * gain;
        let c_cl = &st.b * offset + &st.c;
        let p_next = &value.hessian;
        let pc = p_next * &c_cl;

        let mut hessian = q_cl + a_cl.transpose() * p_next * &a_cl;
        symmetrize(&mut hessian);
        let gradient = q_lin + a_cl.transpose() * (&pc + &value.gradient);
        let constant = q_const + value.constant + 0.5 * c_cl.dot(&pc) + value.gradient.dot(&c_cl);
        value = TerminalQuadratic {
            hessian,
            gradient,
            constant,
        };
    }
    Ok(value)
}

/// Closed-loop trajectory of `stages` under `feedback` starting at `x_start`.
pub fn closed_loop_rollout(
    stages: &[StageLinearization],
    feedback: &[AffineFeedback],
    x_start: &DVector<f64>,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let mut states = vec![x_start.clone()];
    let mut controls = Vec::with_capacity(stages.len());
    for (k, (st, fb)) in stages.iter().zip(feedback).enumerate() {
        let u = fb.apply(&states[k]);
        let next = &st.a * &states[k] + &st.b * &u + &st.c;
        controls.push(u);
        states.push(next);
    }
    (states, controls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn m(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    fn v(data: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(data)
    }

    fn stage(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> StageLinearization {
        let (n_x, n_u) = (a.nrows(), b.ncols());
        StageLinearization {
            a,
            b,
            c: DVector::zeros(n_x),
            q_blk: q,
            r_blk: r,
            s_blk: DMatrix::zeros(n_u, n_x),
            q: DVector::zeros(n_x),
            r: DVector::zeros(n_u),
            const_term: 0.0,
            bounds: None,
        }
    }

    fn scalar_stage() -> StageLinearization {
        let one = m(1, 1, &[1.0]);
        stage(one.clone(), one.clone(), one.clone(), one)
    }

    fn scalar_terminal(p: f64) -> TerminalQuadratic {
        TerminalQuadratic {
            hessian: m(1, 1, &[p]),
            gradient: v(&[0.0]),
            constant: 0.0,
        }
    }

    #[test]
    fn scalar_one_stage() {
        let (head, sweep) = backward_sweep(&[scalar_stage()], &scalar_terminal(1.0)).unwrap();
        assert_relative_eq!(sweep.gains[0][(0, 0)], -0.5);
        assert_relative_eq!(head.hessian[(0, 0)], 1.5);
        assert_eq!(head.gradient[0], 0.0);

        let (states, controls) = forward_sweep(&sweep, &v(&[1.0]), &[scalar_stage()]);
        assert_relative_eq!(controls[0][0], -0.5);
        assert_relative_eq!(states[1][0], 0.5);
    }

    #[test]
    fn no_control_authority() {
        let a = m(2, 2, &[1.0, 0.2, 0.0, 0.9]);
        let q = m(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let p_n = m(2, 2, &[3.0, 0.5, 0.5, 1.0]);
        let st = stage(a.clone(), DMatrix::zeros(2, 1), q.clone(), m(1, 1, &[1.0]));
        let terminal = TerminalQuadratic {
            hessian: p_n.clone(),
            gradient: DVector::zeros(2),
            constant: 0.0,
        };
        let (head, sweep) = backward_sweep(&[st], &terminal).unwrap();
        assert_eq!(sweep.gains[0], DMatrix::zeros(1, 2));
        assert!((head.hessian - (q + a.transpose() * p_n * a)).amax() < 1e-14);
    }

    #[test]
    fn zero_data_gives_zero_increment() {
        let st = stage(
            m(2, 2, &[1.0, 0.1, 0.0, 1.0]),
            m(2, 1, &[0.0, 0.1]),
            DMatrix::identity(2, 2),
            m(1, 1, &[0.1]),
        );
        let stages = vec![st; 4];
        let terminal = TerminalQuadratic {
            hessian: DMatrix::identity(2, 2),
            gradient: DVector::zeros(2),
            constant: 0.0,
        };
        let (_, sweep) = backward_sweep(&stages, &terminal).unwrap();
        let (states, controls) = forward_sweep(&sweep, &DVector::zeros(2), &stages);
        assert!(states
            .iter()
            .chain(controls.iter())
            .all(|x| x.amax() == 0.0));
    }

    #[test]
    fn singular_e_is_a_factorization_error() {
        let st = stage(
            m(1, 1, &[1.0]),
            m(1, 1, &[0.0]),
            m(1, 1, &[1.0]),
            m(1, 1, &[0.0]),
        );
        let err = backward_sweep(&[st], &scalar_terminal(1.0)).unwrap_err();
        assert!(matches!(err, Error::Factorization { stage: 0, .. }));
        let st = stage(
            m(1, 1, &[1.0]),
            m(1, 1, &[1.0]),
            m(1, 1, &[1.0]),
            m(1, 1, &[-2.0]),
        );
        assert!(backward_sweep(&[st], &scalar_terminal(1.0)).is_err());
    }

    #[test]
    fn constant_term_is_propagated() {
        let mut st = scalar_stage();
        st.const_term = 2.0;
        st.c = v(&[0.5]);
        let terminal = TerminalQuadratic {
            hessian: m(1, 1, &[1.0]),
            gradient: v(&[0.25]),
            constant: 3.0,
        };
        let (head, sweep) = backward_sweep(&[st.clone()], &terminal).unwrap();
        // The cost-to-go equals the optimal objective from any start.
        for x0 in [-1.0, 0.0, 0.7] {
            let x0 = v(&[x0]);
            let (states, controls) = forward_sweep(&sweep, &x0, &[st.clone()]);
            let objective = st.cost(&states[0], &controls[0]) + terminal.eval(&states[1]);
            assert_relative_eq!(head.eval(&x0), objective, epsilon = 1e-14);
        }
    }

    #[test]
    fn closed_loop_scalar_hand_evaluation() {
        let fb = AffineFeedback {
            gain: m(1, 1, &[-0.5]),
            offset: v(&[0.0]),
        };
        let head = closed_loop_sweep(&[scalar_stage()], &[fb], &scalar_terminal(1.0)).unwrap();
        assert_relative_eq!(head.hessian[(0, 0)], 1.5);
    }

    #[test]
    fn closed_loop_with_zero_policy_propagates_uncontrolled_cost() {
        let a = m(2, 2, &[1.0, 0.3, -0.1, 0.8]);
        let q = m(2, 2, &[1.0, 0.1, 0.1, 2.0]);
        let st = stage(a.clone(), m(2, 1, &[5.0, -2.0]), q.clone(), m(1, 1, &[0.3]));
        let fb = AffineFeedback {
            gain: DMatrix::zeros(1, 2),
            offset: DVector::zeros(1),
        };
        let terminal = TerminalQuadratic {
            hessian: DMatrix::identity(2, 2),
            gradient: DVector::zeros(2),
            constant: 0.0,
        };
        let head = closed_loop_sweep(&[st.clone(), st], &[fb.clone(), fb], &terminal).unwrap();
        let p1 = &q + a.transpose() * &a;
        let p0 = &q + a.transpose() * &p1 * &a;
        assert!((head.hessian - p0).amax() < 1e-12);
    }

    #[test]
    fn closed_loop_with_optimal_gain_matches_backward_sweep() {
        // One stage: the closed-loop cost under the optimal gain and feedforward
        // equals the minimized cost.
        let mut st = stage(
            m(2, 2, &[1.0, 0.1, 0.0, 1.0]),
            m(2, 1, &[0.005, 0.1]),
            m(2, 2, &[2.0, 0.0, 0.0, 0.5]),
            m(1, 1, &[0.2]),
        );
        st.q = v(&[0.3, -0.1]);
        st.r = v(&[0.05]);
        st.c = v(&[0.01, 0.02]);
        let terminal = TerminalQuadratic {
            hessian: m(2, 2, &[4.0, 1.0, 1.0, 3.0]),
            gradient: v(&[0.1, 0.2]),
            constant: 0.5,
        };
        let (head, sweep) = backward_sweep(&[st.clone()], &terminal).unwrap();
        let fb = AffineFeedback {
            gain: sweep.gains[0].clone(),
            offset: sweep.feedforwards[0].clone(),
        };
        let cl = closed_loop_sweep(&[st], &[fb], &terminal).unwrap();
        assert!((cl.hessian - head.hessian).amax() < 1e-12);
        assert!((cl.gradient - head.gradient).amax() < 1e-12);
        assert_relative_eq!(cl.constant, head.constant, epsilon = 1e-12);
    }
}
