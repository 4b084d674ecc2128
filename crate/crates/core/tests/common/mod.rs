//! Dense oracles and random instances shared by the integration tests.
#![allow(dead_code)]

pub mod lq;

use nalgebra::{DMatrix, DVector};
use pept_core::linearization::{StageBounds, StageLinearization, TerminalQuadratic};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.random_range(-1.0..1.0))
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.random_range(-1.0..1.0))
}

/// `MᵀM + shift·I`.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> DMatrix<f64> {
    let m = random_matrix(rng, n, n, 1.0);
    m.transpose() * &m + DMatrix::identity(n, n) * shift
}

/// Stage with a jointly convex Hessian `[Q Sᵀ; S R]`, `R ≻ 0`.
pub fn random_stage(rng: &mut ChaCha8Rng, n_x: usize, n_u: usize) -> StageLinearization {
    let h = random_spd(rng, n_x + n_u, 0.1);
    StageLinearization {
        a: random_matrix(rng, n_x, n_x, 0.6) + DMatrix::identity(n_x, n_x) * 0.5,
        b: random_matrix(rng, n_x, n_u, 1.0),
        c: random_vector(rng, n_x, 0.3),
        q_blk: h.view((0, 0), (n_x, n_x)).into_owned(),
        r_blk: h.view((n_x, n_x), (n_u, n_u)).into_owned(),
        s_blk: h.view((n_x, 0), (n_u, n_x)).into_owned(),
        q: random_vector(rng, n_x, 1.0),
        r: random_vector(rng, n_u, 1.0),
        const_term: rng.random_range(-1.0..1.0),
        bounds: None,
    }
}

pub fn random_terminal(rng: &mut ChaCha8Rng, n_x: usize) -> TerminalQuadratic {
    TerminalQuadratic {
        hessian: random_spd(rng, n_x, 0.1),
        gradient: random_vector(rng, n_x, 1.0),
        constant: rng.random_range(-1.0..1.0),
    }
}

/// Box around a random center; narrow enough that some faces are active.
pub fn random_bounds(rng: &mut ChaCha8Rng, n_x: usize, n_u: usize) -> StageBounds {
    let mut half = |n: usize| -> (DVector<f64>, DVector<f64>) {
        let center = random_vector(rng, n, 0.3);
        let width = DVector::from_fn(n, |_, _| rng.random_range(0.2..1.5));
        (&center - &width, &center + &width)
    };
    let (x_lb, x_ub) = half(n_x);
    let (u_lb, u_ub) = half(n_u);
    StageBounds {
        x_lb,
        x_ub,
        u_lb,
        u_ub,
    }
}

/// Variable layout `[x_0, u_0, x_1, u_1, …, x_K]`.
pub struct Layout {
    pub n_x: usize,
    pub n_u: usize,
    pub stages: usize,
}

impl Layout {
    pub fn of(stages: &[StageLinearization]) -> Self {
        Self {
            n_x: stages[0].n_x(),
            n_u: stages[0].n_u(),
            stages: stages.len(),
        }
    }

    pub fn x(&self, k: usize) -> usize {
        k * (self.n_x + self.n_u)
    }

    pub fn u(&self, k: usize) -> usize {
        k * (self.n_x + self.n_u) + self.n_x
    }

    pub fn len(&self) -> usize {
        self.stages * (self.n_x + self.n_u) + self.n_x
    }

    pub fn split(&self, z: &DVector<f64>) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let states = (0..=self.stages)
            .map(|k| z.rows(self.x(k), self.n_x).into_owned())
            .collect();
        let controls = (0..self.stages)
            .map(|k| z.rows(self.u(k), self.n_u).into_owned())
            .collect();
        (states, controls)
    }
}

#[derive(Debug, Clone)]
pub struct DenseSolution {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub z: DVector<f64>,
    pub cost: f64,
}

fn objective(
    stages: &[StageLinearization],
    terminal: &TerminalQuadratic,
    layout: &Layout,
) -> (DMatrix<f64>, DVector<f64>, f64) {
    let n = layout.len();
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    let mut c = 0.0;
    for (k, st) in stages.iter().enumerate() {
        let o = layout.x(k);
        let w = layout.n_x + layout.n_u;
        h.view_mut((o, o), (w, w)).copy_from(&st.hessian());
        g.rows_mut(o, layout.n_x).copy_from(&st.q);
        g.rows_mut(layout.u(k), layout.n_u).copy_from(&st.r);
        c += st.const_term;
    }
    let o = layout.x(layout.stages);
    h.view_mut((o, o), (layout.n_x, layout.n_x))
        .copy_from(&terminal.hessian);
    g.rows_mut(o, layout.n_x).copy_from(&terminal.gradient);
    (h, g, c + terminal.constant)
}

/// Minimizes the multi-stage quadratic subject to the dynamics, `x_0 = x0`
/// and `z_i = v` for every `(i, v)` in `fixed`, by one dense KKT solve.
pub fn dense_solve(
    stages: &[StageLinearization],
    terminal: &TerminalQuadratic,
    x0: &DVector<f64>,
    fixed: &[(usize, f64)],
) -> Option<DenseSolution> {
    let layout = Layout::of(stages);
    let (n_x, n) = (layout.n_x, layout.len());
    let (h, g, c) = objective(stages, terminal, &layout);
    let m = n_x * (stages.len() + 1) + fixed.len();
    let mut e = DMatrix::zeros(m, n);
    let mut rhs = DVector::zeros(m);
    e.view_mut((0, 0), (n_x, n_x))
        .copy_from(&DMatrix::identity(n_x, n_x));
    rhs.rows_mut(0, n_x).copy_from(x0);
    for (k, st) in stages.iter().enumerate() {
        let row = n_x * (k + 1);
        e.view_mut((row, layout.x(k)), (n_x, n_x))
            .copy_from(&(-&st.a));
        e.view_mut((row, layout.u(k)), (n_x, layout.n_u))
            .copy_from(&(-&st.b));
        e.view_mut((row, layout.x(k + 1)), (n_x, n_x))
            .copy_from(&DMatrix::identity(n_x, n_x));
        rhs.rows_mut(row, n_x).copy_from(&st.c);
    }
    for (j, &(i, v)) in fixed.iter().enumerate() {
        let row = n_x * (stages.len() + 1) + j;
        e[(row, i)] = 1.0;
        rhs[row] = v;
    }
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(&h);
    kkt.view_mut((n, 0), (m, n)).copy_from(&e);
    kkt.view_mut((0, n), (n, m)).copy_from(&e.transpose());
    let mut b = DVector::zeros(n + m);
    b.rows_mut(0, n).copy_from(&(-&g));
    b.rows_mut(n, m).copy_from(&rhs);
    let sol = kkt.lu().solve(&b)?;
    let z = sol.rows(0, n).into_owned();
    // Inconsistent active sets give singular systems; reject anything that
    // does not satisfy its equalities.
    if (&e * &z - &rhs).amax() > 1e-9 * (1.0 + rhs.amax()) || !z.iter().all(|v| v.is_finite()) {
        return None;
    }
    let cost = 0.5 * z.dot(&(&h * &z)) + g.dot(&z) + c;
    let (states, controls) = layout.split(&z);
    Some(DenseSolution {
        states,
        controls,
        z,
        cost,
    })
}

/// `(P, p, c0)` of the optimal cost as a function of `x_0`, recovered from
/// dense optima at `x_0 ∈ {0, ±e_i, e_i + e_j}`; exact for a quadratic.
pub fn cost_to_go(
    stages: &[StageLinearization],
    terminal: &TerminalQuadratic,
) -> (DMatrix<f64>, DVector<f64>, f64) {
    let n_x = stages[0].n_x();
    let zero = DVector::zeros(n_x);
    let base = dense_solve(stages, terminal, &zero, &[]).expect("regular KKT system");
    let c0 = base.cost;
    // V(e_i) − V(0) and V(e_i + e_j) recover the quadratic exactly.
    let v = |x: &DVector<f64>| dense_solve(stages, terminal, x, &[]).unwrap().cost;
    let unit = |i: usize| {
        let mut e = DVector::zeros(n_x);
        e[i] = 1.0;
        e
    };
    let mut p_mat = DMatrix::zeros(n_x, n_x);
    let mut p_vec = DVector::zeros(n_x);
    let vi: Vec<f64> = (0..n_x).map(|i| v(&unit(i))).collect();
    let vmi: Vec<f64> = (0..n_x).map(|i| v(&(-unit(i)))).collect();
    for i in 0..n_x {
        p_mat[(i, i)] = vi[i] + vmi[i] - 2.0 * c0;
        p_vec[i] = 0.5 * (vi[i] - vmi[i]);
    }
    for i in 0..n_x {
        for j in 0..i {
            let vij = v(&(unit(i) + unit(j)));
            let off = vij - c0 - p_vec[i] - p_vec[j] - 0.5 * (p_mat[(i, i)] + p_mat[(j, j)]);
            p_mat[(i, j)] = off;
            p_mat[(j, i)] = off;
        }
    }
    (p_mat, p_vec, c0)
}

/// One bounded scalar: global index and its box.
struct BoundedVar {
    index: usize,
    lb: f64,
    ub: f64,
}

/// Global minimizer of the box-constrained problem by enumerating every
/// active set (free, at lower, at upper per bounded variable) and keeping the
/// cheapest primal-feasible face minimizer. `x_0` is never bounded.
pub fn enumerate_active_sets(
    stages: &[StageLinearization],
    terminal: &TerminalQuadratic,
    terminal_bounds: Option<(&DVector<f64>, &DVector<f64>)>,
    x0: &DVector<f64>,
) -> DenseSolution {
    let layout = Layout::of(stages);
    let mut vars = Vec::new();
    let mut push = |offset: usize, lb: &DVector<f64>, ub: &DVector<f64>| {
        for j in 0..lb.len() {
            if lb[j].is_finite() || ub[j].is_finite() {
                vars.push(BoundedVar {
                    index: offset + j,
                    lb: lb[j],
                    ub: ub[j],
                });
            }
        }
    };
    for (k, st) in stages.iter().enumerate() {
        if let Some(b) = &st.bounds {
            if k > 0 {
                push(layout.x(k), &b.x_lb, &b.x_ub);
            }
            push(layout.u(k), &b.u_lb, &b.u_ub);
        }
    }
    if let Some((lb, ub)) = terminal_bounds {
        push(layout.x(layout.stages), lb, ub);
    }

    let mut best: Option<DenseSolution> = None;
    'sets: for code in 0..3usize.pow(vars.len() as u32) {
        let mut fixed = Vec::new();
        let mut c = code;
        for v in &vars {
            let side = c % 3;
            c /= 3;
            let value = match side {
                0 => continue,
                1 => v.lb,
                _ => v.ub,
            };
            if !value.is_finite() {
                continue 'sets;
            }
            fixed.push((v.index, value));
        }
        let Some(sol) = dense_solve(stages, terminal, x0, &fixed) else {
            continue;
        };
        let feasible = vars
            .iter()
            .all(|v| sol.z[v.index] >= v.lb - 1e-9 && sol.z[v.index] <= v.ub + 1e-9);
        if feasible && best.as_ref().is_none_or(|b| sol.cost < b.cost) {
            best = Some(sol);
        }
    }
    best.expect("a feasible active set exists")
}

/// Largest absolute entry difference between two trajectories.
pub fn max_diff(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).amax())
        .fold(0.0, f64::max)
}

/// Box QP instance that is feasible by construction: every box contains a
/// rollout of the dynamics from `x0` under random controls.
pub struct BoxInstance {
    pub stages: Vec<StageLinearization>,
    pub terminal: TerminalQuadratic,
    pub terminal_bounds: Option<(DVector<f64>, DVector<f64>)>,
    pub x0: DVector<f64>,
}

impl BoxInstance {
    pub fn terminal_bounds(&self) -> Option<(&DVector<f64>, &DVector<f64>)> {
        self.terminal_bounds.as_ref().map(|(l, u)| (l, u))
    }
}

pub fn random_box_instance(
    rng: &mut ChaCha8Rng,
    n_x: usize,
    n_u: usize,
    horizon: usize,
    with_terminal_box: bool,
) -> BoxInstance {
    let x0 = random_vector(rng, n_x, 1.0);
    let mut stages: Vec<_> = (0..horizon).map(|_| random_stage(rng, n_x, n_u)).collect();
    let around = |rng: &mut ChaCha8Rng, v: &DVector<f64>| {
        let lo = DVector::from_fn(v.len(), |_, _| rng.random_range(0.05..1.0));
        let hi = DVector::from_fn(v.len(), |_, _| rng.random_range(0.05..1.0));
        (v - lo, v + hi)
    };
    let mut x = x0.clone();
    for st in &mut stages {
        let u = random_vector(rng, n_u, 1.0);
        let (x_lb, x_ub) = around(rng, &x);
        let (u_lb, u_ub) = around(rng, &u);
        st.bounds = Some(StageBounds {
            x_lb,
            x_ub,
            u_lb,
            u_ub,
        });
        x = &st.a * &x + &st.b * &u + &st.c;
    }
    let terminal_bounds = with_terminal_box.then(|| around(rng, &x));
    BoxInstance {
        stages,
        terminal: random_terminal(rng, n_x),
        terminal_bounds,
        x0,
    }
}

/// Largest entry of `|a − b|` relative to `max(1, |b|_max)`.
pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}
